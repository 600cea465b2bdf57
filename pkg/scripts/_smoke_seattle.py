"""Smoke: Seattle (Bellevue Express) parameters and Airlink strategy rows."""
import sys, time
sys.path.insert(0, "src")

from headwaylab.fitting import ErlangParams, PatchModel
from headwaylab.simulate import SimConfig, build_model
from headwaylab.properties import (EstimatorConfig, estimate_steady_state,
                                   parse_quatex, ewt_query, evwt_query, bph_query, headway_query)

K = [2, 46, 155, 45, 38, 24, 1, 24, 20, 14, 28, 20]
LAM = [0.0044, 0.1098, 0.3370, 0.1275, 0.0784, 0.0538, 0.0010,
       0.0442, 0.0361, 0.0284, 0.0482, 0.0362]
pm = PatchModel([ErlangParams(k, l) for k, l in zip(K, LAM)])
print("Seattle sum of means:", round(pm.total(), 1))

t0 = time.time()


def run(q, model, target=0.05, budget=45.0, max_t=4_000_000.0, seed=11):
    prop = parse_quatex(q)
    return estimate_steady_state(model, prop.assertions[0], prop.functions,
                                 EstimatorConfig(rel_halfwidth_target=target,
                                                 wall_budget=budget, max_sim_time=max_t),
                                 seed=seed)


cfg = SimConfig(n_buses=12, timetable=True, route_duration=6323.0,
                terminus_patches=(1, 7), seed=11)
model = build_model(pm, cfg)
print("timetable ON (expect rising EWT, p12 > 75, EVWT p12 > 5%):")
for j in (2, 6, 8, 11, 12):
    r = run(ewt_query(j), model, 0.03)
    print(f"  EWT p{j}: {r.estimate:.2f} ± {r.halfwidth:.2f}  [{time.time()-t0:.0f}s]")
r = run(evwt_query(12), model, 0.05)
print(f"  EVWT p12: {r.estimate:.4f} -> {r.verdict}")
r = run(bph_query(12), model, 0.10, budget=20.0, max_t=1_000_000.0)
est = "-" if not r.event_observed else f"{r.estimate:.4f}"
print(f"  BPH p12: {est} -> {r.verdict}  [{time.time()-t0:.0f}s]")

cfg_off = SimConfig(n_buses=12, timetable=False, route_duration=6323.0, seed=11)
model_off = build_model(pm, cfg_off)
print("timetable OFF (expect flat-ish big EWT, EVWT > 5% everywhere, BPH big):")
for j in (1, 6, 12):
    r = run(ewt_query(j), model_off, 0.05, budget=30.0, max_t=2_000_000.0)
    print(f"  EWT p{j}: {r.estimate:.1f} ± {r.halfwidth:.1f}  [{time.time()-t0:.0f}s]")
for j in (1, 12):
    r = run(evwt_query(j), model_off, 0.05, budget=30.0, max_t=2_000_000.0)
    print(f"  EVWT p{j}: {r.estimate:.3f} -> {r.verdict}")
r = run(bph_query(6), model_off, 0.05, budget=30.0, max_t=2_000_000.0)
print(f"  BPH p6: {r.estimate:.4f} -> {r.verdict}  [{time.time()-t0:.0f}s]")

# --- Airlink strategies (Table 8 anchored rows)
K = [44, 106, 68, 73, 17, 37, 40, 30, 78, 101]
LAM = [0.0482, 0.4190, 0.1858, 0.2011, 0.0523, 0.0710, 0.0419, 0.0765, 0.1196, 0.1895]
pma = PatchModel([ErlangParams(k, l) for k, l in zip(K, LAM)])
print("Airlink holding 120 + timetable (Table-8 row b):")
cfg = SimConfig(n_buses=11, timetable=True, route_duration=5259.0,
                terminus_patches=(1, 7), holding_threshold=120.0, seed=5)
model = build_model(pma, cfg)
for j in (2, 5, 7, 10):
    r = run(ewt_query(j), model, 0.03, seed=5)
    print(f"  EWT p{j}: {r.estimate:.2f} ± {r.halfwidth:.2f}")
r = run(headway_query(5), model, 0.001, seed=5)
print(f"  mean headway p5: {r.estimate:.2f}")

print("Airlink holding-only sweep (Table-8 ordering check):")
for theta in (60.0, 120.0, 180.0, 240.0, 300.0):
    cfg = SimConfig(n_buses=11, timetable=False, holding_threshold=theta, seed=7)
    model = build_model(pma, cfg)
    rh = run(headway_query(2), model, 0.002, budget=60.0, max_t=6_000_000.0, seed=7)
    re = run(ewt_query(2), model, 0.03, budget=60.0, max_t=6_000_000.0, seed=7)
    print(f"  theta={theta:.0f}: headway {rh.estimate:.2f} ± {rh.halfwidth:.2f}, "
          f"EWT p2 {re.estimate:.1f} ± {re.halfwidth:.1f}  [{time.time()-t0:.0f}s]")
