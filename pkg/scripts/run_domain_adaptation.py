"""Train on labelled WLI (plus unlabelled NBI for the jigsaw phase), test on labelled NBI."""

from _common import parse

from jigssl.experiments import render_report, run_domain_adaptation

if __name__ == "__main__":
    cfg, manifest = parse(__doc__, "domain-adaptation", "runs/domain_adaptation")
    report = run_domain_adaptation(cfg, manifest)
    render_report(report, cfg.output_dir)
    print(report.train_counts)
    print(report.markdown())
