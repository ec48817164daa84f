//! Trains on a generated separable scene and prints the run summary.

use cadgcn::synthetic::SyntheticSpec;
use cadgcn::trainer::{train, TrainConfig};

fn main() -> cadgcn::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let (cube, labels) = SyntheticSpec::default().generate();
    let config = TrainConfig { iterations, per_class: 10, small_class_budget: 10, ..TrainConfig::default() };
    let out = train(&cube, &labels, &config)?;
    let r = &out.record;
    println!("regions {:?}, train {}, val {}, test {}", r.region_count, r.train_pixels, r.val_pixels, r.test_pixels);
    for p in &r.val_history {
        println!("iter {:>5} loss {:>10.5} val OA {:.3}", p.iteration, r.loss[p.iteration - 1], p.val_oa);
    }
    if let Some(m) = &r.test_metrics {
        print!("{}", m.report());
    }
    if let Some(m) = &r.final_test_metrics {
        println!("final iterate OA {:.4}", m.overall_accuracy);
    }
    println!("selected iteration {}, {:.2}s", r.selected_iteration, r.wall_clock_seconds);
    Ok(())
}
