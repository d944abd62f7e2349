//! Multi-seed protocol driver: runs the baseline, CL-only, MCL and full
//! configurations over a set of seeds and prints median unseen mIoU and
//! HmIoU for each, the same quantities the acceptance suite asserts on.

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
        .unwrap_or_else(|| vec![1, 2, 3, 4, 5]);
    let variants: [(&str, bool, bool, bool, bool); 4] = [
        ("baseline", false, false, false, false),
        ("cl_only ", false, true, false, false),
        ("mcl     ", true, true, false, false),
        ("full    ", true, true, true, true),
    ];
    println!("settings: {:?}", ExperimentConfig::default().train);
    for (name, mask, contrast, hpa, rtc) in variants {
        let mut unseen = Vec::new();
        let mut hm = Vec::new();
        let mut seen = Vec::new();
        for &seed in &seeds {
            let mut cfg = ExperimentConfig::default();
            cfg.train.seed = seed;
            cfg.train.mcl_mask = mask;
            cfg.train.mcl_contrast = contrast;
            cfg.train.hpa = hpa;
            cfg.train.rtc = rtc;
            let start = std::time::Instant::now();
            let out = run_full_pipeline(&cfg).unwrap();
            println!(
                "  {name} seed {seed}: seen {:.4} unseen {:.4} hmiou {:.4} gamma {:?} w {:?} ({:.1?})",
                out.report.miou_seen,
                out.report.miou_unseen,
                out.report.hmiou,
                out.calibration.as_ref().map(|c| c.gamma),
                out.calibration.as_ref().map(|c| c.unseen_weight),
                start.elapsed()
            );
            seen.push(out.report.miou_seen);
            unseen.push(out.report.miou_unseen);
            hm.push(out.report.hmiou);
        }
        println!(
            "{name}: median seen {:.4} | median unseen {:.4} | median hmiou {:.4}",
            median(seen),
            median(unseen),
            median(hm)
        );
    }
}
