"""WLI-trained models score held-out WLI vs NBI frames; writes ROC curves and AUROC."""

from _common import parse

from jigssl.experiments import render_report, run_ood_experiment

if __name__ == "__main__":
    cfg, manifest = parse(__doc__, "ood", "runs/ood")
    report = run_ood_experiment(cfg, manifest)
    render_report(report, cfg.output_dir)
    for run in report.runs:
        print(run)
    print(report.markdown())
