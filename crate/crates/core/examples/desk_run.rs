//! Train and evaluate on a freshly generated synthetic dataset.
//!
//! `cargo run --release -p atac-core --example desk_run -- [seed] [single]`

use atac_core::eval::zoom_masses;
use atac_core::experiment::{prepare_data, run_on, ExperimentConfig};
use atac_core::data::synth::{self, Split};

fn main() -> atac_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let mut cfg = ExperimentConfig { seed, ..Default::default() };
    if args.next().as_deref() == Some("single") {
        cfg.scoring.two_pass = false;
    }
    let dir = tempfile::tempdir().expect("temp dir");
    let (train, test) = prepare_data(&cfg, dir.path())?;
    let r = run_on(&cfg, &train, &test)?;
    for row in &r.log {
        println!(
            "epoch {:2} lr {:.0e} loss {:.4} normal {:.3} anomaly {:.3}",
            row.epoch, row.lr, row.mean_loss, row.mean_score_normal, row.mean_score_anomaly
        );
    }
    let k = cfg.train.loss.k;
    let frac = |label: u8, above: bool| {
        let v: Vec<_> = r.scored.iter().filter(|s| s.label == label).collect();
        v.iter().filter(|s| (s.score.abs() > k / 2.0) == above).count() as f64 / v.len() as f64
    };
    println!("normals inside k/2 {:.2}, anomalies beyond k/2 {:.2}", frac(0, false), frac(1, true));
    let single = r.rows.iter().zip(&r.scored).map(|(row, s)| atac_core::eval::ScoredSample { score: row.score.raw, ..s.clone() }).collect::<Vec<_>>();
    println!("auroc {:.4} (raw pass only {:.4}) in {:.1}s", r.auroc, atac_core::eval::auroc(&single)?, r.train_time.as_secs_f64());

    let ck = &r.checkpoint;
    let mut wins = 0;
    for i in 0..cfg.synth.test_anomalous {
        let rendered = synth::render(&cfg.synth, Split::Test, 1, i);
        let gt = rendered.defect.expect("anomalous render has a defect");
        let (raw, crop) = zoom_masses(&ck.model, &ck.scoring, &ck.params, &rendered.image, &gt)?;
        wins += usize::from(crop > raw);
    }
    println!("crop view concentrates saliency on the defect for {wins}/{}", cfg.synth.test_anomalous);
    Ok(())
}
