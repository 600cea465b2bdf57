"""Smoke: synthetic 8-patch fixture through the full mapgen+patches+fit chain."""
import sys, time
sys.path.insert(0, "src")
import numpy as np

from headwaylab import fitting, graphs, patches, raster, route, synthetic

t0 = time.time()
model = synthetic.default_eight_patch_model()
print("one-way length:", round(model.route.oneway_length, 1),
      "loop:", round(model.route.loop_length, 1))
print("generating traces...")
ts = synthetic.generate_traces(model, n_buses=12, days=10, seed=3)
print(f"  {len(ts)} records [{time.time()-t0:.0f}s]")

heat = raster.rasterize_heatmap(ts, resolution=900, delta=0.0)
print(f"heatmap {heat.width}x{heat.height} cell {heat.cell_size:.2f} max {heat.intensity.max():.0f} "
      f"nonzero {int((heat.intensity>0).sum())} [{time.time()-t0:.0f}s]")
blur = raster.gaussian_blur(heat, 1.0)
tau = 0.3
sk = raster.skeletonize(blur, tau=tau, eta=np.percentile(blur.intensity[blur.intensity>0], 90) / 40)
print(f"skeleton {int(sk.mask.sum())} px [{time.time()-t0:.0f}s]")

g = graphs.build_graph(sk, epsilon=2.0, split_divisor=1.0)
print(f"graph: {len(g.nodes)} nodes {len(g.edges)} edges len {g.total_length():.0f} [{time.time()-t0:.0f}s]")

rm = route.derive_route_model(g, ts, rejection_radius=3 * heat.cell_size)
d1, d2 = rm.direction_length(0), rm.direction_length(1)
truth = model.route.oneway_length
print(f"route: dir1 {d1:.0f} dir2 {d2:.0f} truth {truth:.0f} "
      f"err {abs(d1-truth)/truth*100:.2f}% / {abs(d2-truth)/truth*100:.2f}% [{time.time()-t0:.0f}s]")

counts = patches.bin_counts(ts, rm, gamma=40)
print("bin counts:", counts.counts)
ps = patches.jenks_cluster_counts(counts, 8)
truth_bins = [2, 8, 14, 18, 20, 26, 33]
rot = sorted(((b + 20) % 40) for b in truth_bins)
print("recovered breaks (bins):", ps.break_bins, " truth:", truth_bins, " rotated:", rot)
shift = 0
if ps.break_bins == rot or sum(abs(a-b) for a,b in zip(ps.break_bins, rot)) < sum(abs(a-b) for a,b in zip(ps.break_bins, truth_bins)):
    shift = 4
    print("  (recovered origin at the far terminus; comparing with rotation)")
ps_diff = patches.jenks_cluster(counts, 8)
print("diff-jenks breaks      :", ps_diff.break_bins)

obs = fitting.extract_crossing_times(ts, rm, ps)
for j in sorted(obs):
    mus = np.mean(obs[j]) if obs[j] else float("nan")
    true_mu = model.params[(j - 1 + shift) % 8].mean
    print(f"  patch {j}: n={len(obs[j])} mean={mus:.1f} truth={true_mu:.1f} "
          f"err={(mus-true_mu)/true_mu*100:+.1f}%")
print(f"total [{time.time()-t0:.0f}s]")
