"""Optimize a two-arm half fold of the towel.

Starts from the default arched trajectory, runs the trajectory optimizer and
compares the result with a trajectory that drags the corners flat across the
table. The folded shapes are written as OBJ files for viewing.

Run from the repository root::

    python demos/fold_towel.py
"""

from pathlib import Path

from drapekit.fixtures import garment_mesh, towel
from drapekit.mesh import save_obj
from drapekit.trajectory import dissimilarity, fold_task, optimize_trajectory, simulate_curves, trajectory_cost

OUT = Path(__file__).resolve().parent.parent / "runs" / "demo_fold"


def main():
    mesh = garment_mesh(towel())
    grasp = [mesh.anchors["corner_b"], mesh.anchors["corner_c"]]
    task = fold_task(mesh, grasp, (0.2, 0.0), (0.0, 1.0))

    def progress(entry):
        mark = "accepted" if entry["accepted"] else "rejected"
        print(f"  iteration {entry['iter']:2d}: cost {entry['cost']:8.3f} ({mark})")

    res = optimize_trajectory(task, callback=progress)
    flat = fold_task(mesh, grasp, (0.2, 0.0), (0.0, 1.0), h=0.0)
    flat_shape = simulate_curves(flat, flat.curves(flat.initial_x()))
    print(f"initial   cost {res.initial_cost:7.2f}  dissimilarity {1e3 * res.initial_dissimilarity:6.2f} mm")
    print(f"optimized cost {res.cost:7.2f}  dissimilarity {1e3 * res.dissimilarity:6.2f} mm")
    print(f"low flat  cost {trajectory_cost(flat, flat.initial_x())[0]:7.2f}  "
          f"dissimilarity {1e3 * dissimilarity(flat.target, flat_shape):6.2f} mm")
    OUT.mkdir(parents=True, exist_ok=True)
    save_obj(task.target, OUT / "target.obj", sidecar=False)
    save_obj(simulate_curves(task, res.curves), OUT / "optimized.obj", sidecar=False)
    save_obj(flat_shape, OUT / "low_flat.obj", sidecar=False)
    print(f"shapes written to {OUT}")


if __name__ == "__main__":
    main()
