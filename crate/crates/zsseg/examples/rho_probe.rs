//! Probe: median unseen mIoU of the full pipeline as a function of the
//! world's semantic correlation rho.

use zsseg::config::ExperimentConfig;
use zsseg::runner::run_full_pipeline;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|t| t.parse().unwrap()).collect())
        .unwrap_or_else(|| (1..=7).collect());
    for &rho in &[0.0, 0.5, 1.0] {
        let mut unseen = Vec::new();
        for &seed in &seeds {
            let mut cfg = ExperimentConfig::default();
            cfg.rho = rho;
            cfg.train.seed = seed;
            let out = run_full_pipeline(&cfg).unwrap();
            print!("{:.4} ", out.report.miou_unseen);
            use std::io::Write as _;
            std::io::stdout().flush().unwrap();
            unseen.push(out.report.miou_unseen);
        }
        println!("| rho {rho}: median unseen {:.4}", median(unseen));
    }
}
