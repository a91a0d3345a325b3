"""Quadrature sensitivity of the random-intercept fit, and why its
coefficients exceed the marginal ones.

Run with ``python3 demos/quadrature_and_attenuation.py``.
"""
from longit import GlmmSpec, SimSpec, attenuation_ratio, fit_gee, fit_glmm, quadrature_scan
from longit.sim import simulate, simulate_complete

LAST = "visit[4]:trt[1]"

spec = SimSpec(N=300, intercepts=(-1.0, -0.5, 0.0, 0.5), effects=((0.5, 0.75, 1.0, 1.25),),
               sigma=2.0, psi_intercept=-1.5, psi_prev=1.0, seed=11)
scan = quadrature_scan(simulate(spec), GlmmSpec(), params=[LAST, "sigma"])

# Nonadaptive rules need many more points before the estimates settle.
for param in (LAST, "sigma"):
    print(f"\n{param}")
    for mode in ("nonadaptive", "adaptive"):
        est = scan.estimates(mode, "quasi-newton", param)
        print(f"  {mode:<12s} " + "  ".join(f"Q={q}:{v:7.4f}" for q, v in est.items()))
print("\nstable at Q=50 vs Q=20:",
      {k: v for k, v in scan.stable.items() if k[1] == "quasi-newton"})

# With a large sample the ratio of subject-specific to population-averaged
# coefficients tracks sqrt(c^2 sigma^2 + 1).
big = simulate_complete(SimSpec(N=20000, intercepts=spec.intercepts, effects=spec.effects,
                                sigma=2.0, seed=1111))
re = fit_glmm(big, GlmmSpec())
marg = fit_gee(big, "y ~ 0 + visit + visit:trt", "ind")
print(f"\nsigma-hat {re.sigma:.3f}, approximate ratio {float(attenuation_ratio(re.sigma)):.3f}")
for c, a, b in zip(re.columns, re.beta, marg.beta):
    note = "" if abs(b) > 0.3 else "  (too close to 0 for a stable ratio)"
    print(f"  {c:<18s} GLMM {a:7.3f}  marginal {b:7.3f}  ratio {a / b:7.3f}{note}")
