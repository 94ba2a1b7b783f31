//! SRCC and PLCC on a small prediction set, with ties and a monotone
//! transform.
//!
//! ```text
//! cargo run --example rank_metrics
//! ```

use bpclip::metrics::{self, MetricsReport, SplitMetrics};

fn main() -> bpclip::Result<()> {
    let mos = [4.1, 3.2, 3.2, 2.5, 1.9, 4.8, 2.2];
    let pred = [0.81, 0.60, 0.66, 0.40, 0.41, 0.95, 0.30];
    println!("mid ranks of mos: {:?}", metrics::mid_ranks(&mos));
    let m = SplitMetrics::compute(&pred, &mos)?;
    println!("SRCC {:.4}  PLCC {:.4}", m.srcc, m.plcc);

    let squashed: Vec<f64> = pred.iter().map(|p| p * p * p).collect();
    println!("after cubing predictions: SRCC {:.4}  PLCC {:.4}", metrics::srcc(&squashed, &mos)?, metrics::plcc(&squashed, &mos)?);

    let other = SplitMetrics::compute(&pred[..5], &mos[..5])?;
    println!("{}", MetricsReport::from_splits(vec![m, other]));

    match metrics::srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]) {
        Ok(v) => println!("constant predictions: {v}"),
        Err(e) => println!("constant predictions: {e}"),
    }
    Ok(())
}
