"""Quick smoke check: Airlink published parameters -> EWT/EVWT per patch."""
import sys, time
sys.path.insert(0, "src")

from headwaylab.fitting import ErlangParams, PatchModel
from headwaylab.simulate import SimConfig, build_model
from headwaylab.properties import (EstimatorConfig, estimate_steady_state,
                                   parse_quatex, ewt_query, evwt_query, bph_query, headway_query)

K = [44, 106, 68, 73, 17, 37, 40, 30, 78, 101]
LAM = [0.0482, 0.4190, 0.1858, 0.2011, 0.0523, 0.0710, 0.0419, 0.0765, 0.1196, 0.1895]
pm = PatchModel([ErlangParams(k, l) for k, l in zip(K, LAM)])
print("sum of means:", pm.total())

cfg = SimConfig(n_buses=11, timetable=True, route_duration=5259.0,
                terminus_patches=(1, 7), seed=42)
model = build_model(pm, cfg)
print("mu_tot:", model.mu_tot)

ecfg = EstimatorConfig(rel_halfwidth_target=0.02, wall_budget=60.0,
                       max_sim_time=3_000_000.0)

t0 = time.time()
for j in (1, 2, 5, 6, 7, 10):
    prop = parse_quatex(ewt_query(j))
    r = estimate_steady_state(model, prop.assertions[0], prop.functions, ecfg, seed=42)
    print(f"EWT patch {j}: {r.estimate:.3f} ± {r.halfwidth:.3f} "
          f"(batches {r.batches}, sim_t {r.sim_time:.0f}, verdict {r.verdict}) "
          f"[{time.time()-t0:.1f}s]")

for j in (5, 6, 9, 10):
    prop = parse_quatex(evwt_query(j))
    r = estimate_steady_state(model, prop.assertions[0], prop.functions,
                              EstimatorConfig(rel_halfwidth_target=0.10, wall_budget=90.0,
                                              max_sim_time=20_000_000.0), seed=42)
    est = "-" if not r.event_observed else f"{r.estimate:.4f} ± {r.halfwidth:.4f}"
    print(f"EVWT patch {j}: {est} (verdict {r.verdict}) [{time.time()-t0:.1f}s]")

prop = parse_quatex(headway_query(2))
r = estimate_steady_state(model, prop.assertions[0], prop.functions,
                          EstimatorConfig(rel_halfwidth_target=0.001, wall_budget=30.0,
                                          max_sim_time=2_000_000.0), seed=42)
print(f"mean headway patch 2: {r.estimate:.2f} ± {r.halfwidth:.3f} [{time.time()-t0:.1f}s]")

prop = parse_quatex(bph_query(6))
r = estimate_steady_state(model, prop.assertions[0], prop.functions,
                          EstimatorConfig(rel_halfwidth_target=0.10, wall_budget=20.0,
                                          max_sim_time=500_000.0), seed=42)
est = "-" if not r.event_observed else f"{r.estimate:.5f}"
print(f"BPH patch 6: {est} (verdict {r.verdict}) [{time.time()-t0:.1f}s]")
