"""Acceptance criteria C1 to C17, each checked at its stated tolerance on the unit disk with N = 400."""

import math

from phigreen import cli_harness as cli

from conftest import ACCEPTANCE

_RUNS = {}


def checks(exp, tmp_path_factory):
    if exp not in _RUNS:
        out = tmp_path_factory.mktemp(exp.lower())
        rep = cli.run(cli.ExperimentConfig(exp, out=str(out)))
        _RUNS[exp] = {c.name: c for c in rep.checks}
    return _RUNS[exp]


def record(key, ok, text):
    ACCEPTANCE[key] = ("PASS" if ok else "FAIL", text)
    print(f"{key} {'PASS' if ok else 'FAIL'} {text}")
    assert ok, text


def test_c01_spectral_inversion(tmp_path_factory):
    c = checks("EXP1", tmp_path_factory)
    worst = max(c["spectral_inversion"].measured.values())
    ok = worst <= 1e-8 and c["spectral_inversion_runtime"].measured["within_limit"]
    record("C1", ok, f"spectral inversion sup defect {worst:.2e} (<= 1e-8, under 30 s)")


def test_c02_two_route(tmp_path_factory):
    c = checks("EXP2", tmp_path_factory)
    rel = c["two_route_agreement"].measured["max_rel"]
    ok = rel <= 1e-3 and c["two_route_runtime"].measured["within_limit"]
    record("C2", ok, f"two-route relative difference {rel:.2e} (<= 1e-3)")


def test_c03_factorization(tmp_path_factory):
    c = checks("EXP1", tmp_path_factory)
    mode = c["factorization_modes"].measured["mode_defect"]
    ker = c["factorization_kernel"].measured["max_rel"]
    record("C3", mode <= 1e-12 and ker <= 2e-2, f"factorization mode {mode:.1e}, kernel {ker:.2e}")


def test_c04_killing(tmp_path_factory):
    c = checks("EXP3", tmp_path_factory)
    worst = max(c["killing_identity"].measured.values())
    ok = worst <= 1e-2 and c["killing_runtime"].measured["within_limit"]
    record("C4", ok, f"killing identity relative defect {worst:.2e} (<= 1e-2)")


def test_c05_sharp_bands(tmp_path_factory):
    c = checks("EXP4", tmp_path_factory)
    ceilings = {"band_green": 20, "band_poisson": 20, "band_jump": 30}
    parts, ok = [], True
    for name, cap in ceilings.items():
        m = c[name].measured
        drift = abs(m["band_N2"] / m["band_N1"] - 1)
        ok &= m["band_N1"] <= cap and m["band_N2"] <= cap and drift <= 0.2
        parts.append(f"{name[5:]} {m['band_N1']:.1f}")
    record("C5", ok, "bands " + ", ".join(parts) + " (stable under N 400 to 900)")


def test_c06_boundary_slope(tmp_path_factory):
    c = checks("EXP5", tmp_path_factory)
    m = c["boundary_slope"].measured
    ok = all(abs(m[f"s={s}"] + (2 - 2 * s)) <= 0.15 for s in (0.3, 0.5, 0.7))
    record("C6", ok, "slopes " + ", ".join(f"{k}: {v:.3f}" for k, v in m.items()))


def test_c07_u_profile(tmp_path_factory):
    m = checks("EXP5", tmp_path_factory)["u_profile"].measured
    profiles = ("beta=0", "beta=0.5", "beta=1.4")
    ok = m["decades"] >= 3 and m["beta=2.5"] == "infinite"
    ok &= all(m[b]["band"] <= 30 and m[b]["decay"] <= 0.05 for b in profiles)
    worst = max(m[b]["band"] for b in profiles)
    record("C7", ok, f"profile band {worst:.2f} over {m['decades']:.2f} decades")


def test_c08_poisson_trace(tmp_path_factory):
    c = checks("EXP6", tmp_path_factory)
    pw = max(c["pointwise_trace"].measured.values())
    weak = c["weak_trace"].measured
    ok = pw <= 0.05 and len(weak) >= 3 and max(weak.values()) <= 0.05
    record("C8", ok, f"pointwise {pw:.1e}, weak {max(weak.values()):.3f} (<= 0.05, 3 test functions)")


def test_c09_green_trace(tmp_path_factory):
    m = checks("EXP6", tmp_path_factory)["green_trace"].measured
    record("C9", m["final_ratio"] <= 0.05, f"Green trace ratio {m['final_ratio']:.1e} (<= 0.05)")


def test_c10_kato(tmp_path_factory):
    m = checks("EXP7", tmp_path_factory)["kato"].measured
    record("C10", m["max_relative_defect"] <= 1e-3, f"Kato relative defect {m['max_relative_defect']:.1e}")


def test_c11_monotone(tmp_path_factory):
    m = checks("EXP8", tmp_path_factory)["monotone_solver"].measured
    ok = m["residual"] <= 1e-8 and m["iterations"] <= 200 and m["min_increment"] >= -1e-12 and m["within_0_2P"]
    record("C11", ok, f"monotone residual {m['residual']:.1e} in {m['iterations']} iterations")


def test_c12_nonpositive(tmp_path_factory):
    m = checks("EXP8", tmp_path_factory)["nonpositive_solver"].measured
    ok = m["bracket_width"] <= 1e-8 and m["start_difference"] <= 1e-6
    record("C12", ok, f"bracket width {m['bracket_width']:.1e}, start difference {m['start_difference']:.1e}")


def test_c13_threshold(tmp_path_factory):
    m = checks("EXP8", tmp_path_factory)["threshold"].measured
    low = [v for k, v in m.items() if k.startswith("p=1.5")]
    high = [v for k, v in m.items() if k.startswith("p=2.5")]
    ok = low and all(v["classification"] == "CONVERGENT" for v in low)
    grows = [v for v in high if v["classification"] == "DIVERGENT"
             and all((g == "inf" or g >= 2) for g in v["growth"]) and len(v["growth"]) == 2]
    ok = bool(ok and grows)
    g = grows[0]["growth"] if grows else []
    record("C13", ok, f"p=1.5 CONVERGENT, p=2.5 DIVERGENT with growth {g}")


def test_c14_signed(tmp_path_factory):
    m = checks("EXP8", tmp_path_factory)["signed_solver"].measured
    ok = m["residual"] <= 1e-8 and m["bound_excess"] <= 0 and m["reproducible"]
    record("C14", ok, f"signed residual {m['residual']:.1e}, bound excess {m['bound_excess']:.2f}")


def test_c15_monte_carlo(tmp_path_factory):
    c = checks("EXP9", tmp_path_factory)
    z = c["mc_green"].measured["z"]
    mv = c["mc_mean_value"].measured
    ok = len(z) == 3 and max(abs(v) for v in z.values()) <= 3 and mv["defect"] <= 3 * mv["se"]
    ok &= c["mc_runtime"].measured["within_limit"]
    record("C15", ok, f"max |z| {max(abs(v) for v in z.values()):.2f}, mean value {mv['defect']:.4f} vs SE {mv['se']:.4f}")


def test_c16_max_principle(tmp_path_factory):
    m = checks("EXP7", tmp_path_factory)["max_principle"].measured
    record("C16", m["pairs"] == 50 and m["violations"] == 0, f"{m['violations']} violations over {m['pairs']} pairs")


def test_c17_scaling(tmp_path_factory):
    c = checks("EXP1", tmp_path_factory)
    m = c["wsc_stable"].measured
    ok = all(abs(m[f"s={s}"][0] - s) <= 0.05 and abs(m[f"s={s}"][1] - s) <= 0.05 for s in (0.3, 0.5, 0.7))
    d1, d2 = c["wsc_composite"].measured["sum"]
    ok &= d1 >= 0.25 and d2 <= 0.75 and math.isfinite(d1)
    record("C17", ok, f"composite exponents ({d1:.3f}, {d2:.3f})")
