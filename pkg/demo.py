#!/usr/bin/env python3
"""
Demo Script for IMRE
====================

Walks through a tiny end-to-end experiment in-process: forge a few operator
pairs, train the generator and the atlas, simulate one paced case and invert it
with and without the learned correction.
"""

import sys
from pathlib import Path

import numpy as np

# Add the project root to the Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root / "src"))


def show_configuration():
    """Show the tiny configuration used below."""
    print("🔧 Configuration")
    print("-" * 30)

    from imre.config import ExperimentConfig

    cfg = ExperimentConfig(
        n_source=24, n_sensor=16, dataset_count=12,
        gen_epochs=20, gen_batch_size=8, gen_latent_dim=2, gen_hidden_widths=[16],
        som_width=3, som_height=3, som_epochs=20, som_radius_initial=1.5,
        ap_steps=300, dfo_budget=30, max_outer=3, log_level="WARNING",
    )
    print(f"✓ Geometry: {cfg.n_source} source / {cfg.n_sensor} sensor nodes")
    print(f"✓ Operators: {cfg.dataset_count} over {len(cfg.dataset_classes)} classes")
    print(f"✓ Latent dim: {cfg.gen_latent_dim}, SOM {cfg.som_width}x{cfg.som_height}")
    print()
    return cfg


def forge_pairs(cfg):
    print("🧱 Forging Operator Pairs")
    print("-" * 30)

    from imre.forge import forge_dataset

    manifest = forge_dataset(cfg.dataset_count, cfg.error_classes(), cfg.seed,
                             n_source=cfg.n_source, n_sensor=cfg.n_sensor)
    print(f"✓ Pairs: {len(manifest.pairs)} "
          f"({len(manifest.train_pairs())} train / {len(manifest.test_pairs())} test)")
    print()
    return manifest


def train_models(cfg, manifest):
    print("🧠 Training Generator and Atlas")
    print("-" * 30)

    from imre.generator import GeneratorModel, latent_codes, train
    from imre.som import train_som

    gen_cfg = cfg.generator_config()
    shape = manifest.pairs[0].h_i.shape
    result = train(GeneratorModel.initialize(shape, gen_cfg), manifest, gen_cfg)
    print(f"✓ Loss: {result.curve[0].total:.4f} → {result.curve[-1].total:.4f}")

    codes, labels = latent_codes(result.model, manifest.train_pairs())
    grid, lm = train_som(None, list(zip(codes, labels)), cfg.som_config())
    print(f"✓ Atlas quantization error: {grid.quantization_trace[-1]:.4f}")
    print()
    return result.model, grid, lm


def invert_case(cfg, manifest, model, grid, lm):
    print("❤️  Simulating and Inverting One Case")
    print("-" * 30)

    from imre.cardiac import add_noise, forward_project, pick_pacing_sites, simulate_ap
    from imre.forge import make_base_geometry
    from imre.inverse import (
        InverseProblem,
        alternate_optimize,
        build_laplacian,
        detect_error_source,
        tikhonov_solve,
    )
    from imre.metrics import evaluate_solution

    mesh, _ = make_base_geometry(cfg.n_source, cfg.n_sensor, cfg.seed)
    pair = manifest.test_pairs()[0]
    site = pick_pacing_sites(mesh, 1, cfg.seed)[0]
    u_true = simulate_ap(mesh, site, cfg.ap_params())
    y = add_noise(forward_project(pair.h_f, u_true), cfg.snr_db, seed=[cfg.seed, 5, 0])
    laplacian = build_laplacian(mesh)

    u_initial = tikhonov_solve(pair.h_i, y, cfg.inv_lambda, laplacian)
    problem = InverseProblem(y=y, h_i=pair.h_i, model=model, lam=cfg.inv_lambda,
                             laplacian=laplacian)
    result = alternate_optimize(problem, cfg.dfo_config(), cfg.convergence())

    for name, u in (("initial", u_initial), ("imre", result.u)):
        m = evaluate_solution(u, u_true, mesh, site)
        print(f"✓ {name:<8} RMSE {m.rmse:.4f}  SCC {m.scc:.3f}  TCC {m.tcc:.3f}  "
              f"loc {m.loc_dist_mm:.1f} mm")
    print(f"✓ Outer iterations: {len(result.trace)} (converged: {result.converged})")
    print(f"✓ Latent code: {np.round(result.z.z, 3)}")
    print(f"✓ Error class: true {pair.label.value}, "
          f"predicted {detect_error_source(result.z, grid, lm).value}")
    print()


def show_next_steps():
    print("📝 Next Steps")
    print("-" * 30)
    print("1. Install the package:")
    print("   pip install -e .[dev]")
    print()
    print("2. Write a config file:")
    print("   imre init --config-path imre.env")
    print()
    print("3. Run the desk-scale experiment:")
    print("   imre run-all --config imre.env --seed 0 --out runs/desk")
    print()
    print("4. Read the documentation:")
    print("   - README.md")
    print("   - docs/installation.md")
    print("   - docs/api.md")


def main():
    """Main demonstration function."""
    print("🎉 IMRE Demo")
    print("=" * 50)
    print()

    try:
        from imre.logging_config import configure_logging

        cfg = show_configuration()
        configure_logging(cfg.log_level, cfg.log_format)
        manifest = forge_pairs(cfg)
        model, grid, lm = train_models(cfg, manifest)
        invert_case(cfg, manifest, model, grid, lm)
        show_next_steps()

        print("✅ Demo finished.")

    except Exception as e:
        print(f"❌ Error during demo: {e}")
        import traceback
        traceback.print_exc()


if __name__ == "__main__":
    main()
