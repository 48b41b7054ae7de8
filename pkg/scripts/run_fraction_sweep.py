"""Baseline vs SSL across labelled fractions, one fold by default (see configs/fraction_sweep.cfg)."""

from _common import parse

from jigssl.experiments import render_report, run_fraction_sweep, sweep_markdown

if __name__ == "__main__":
    cfg, manifest = parse(__doc__, "fraction-sweep", "runs/fraction_sweep")
    report = run_fraction_sweep(cfg, manifest)
    render_report(report, cfg.output_dir)
    print(sweep_markdown(report))
    if report.failed:
        print(f"{len(report.failed)} cells failed")
