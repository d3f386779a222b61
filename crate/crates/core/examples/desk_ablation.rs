//! Component ablation on the default synthetic split over several seeds.
//!
//! `cargo run --release --example desk_ablation -- [seeds] ["key=value;key=value"]`
//!
//! Prints drone→satellite R@1 per variant and the per-variant medians.

use std::time::Instant;

use geolink::retrieval::Direction;
use geolink::synthetic::{Dataset, DatasetConfig};
use geolink::trainer::{ablation_matrix, TrainConfig, Trainer};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).map_or(Ok(5), |s| s.parse())?;
    let overrides = args.get(2).cloned().unwrap_or_default().replace(';', "\n");
    let variants = ablation_matrix();
    let mut scores = vec![Vec::new(); variants.len()];
    for seed in 0..seeds {
        let data = Dataset::generate(&DatasetConfig { seed, ..DatasetConfig::default() })?;
        let base = TrainConfig::from_toml(&format!("seed = {seed}\n{overrides}"))?;
        let mut line = format!("seed {seed}:");
        for (v, s) in variants.iter().zip(&mut scores) {
            let t0 = Instant::now();
            let mut t = Trainer::new(v.apply(&base)?, &data)?;
            t.run(None)?;
            let r = t.evaluate_both(&[1])?;
            let d2s = r.iter().find(|r| r.direction == Direction::DroneToSatellite).expect("d2s evaluated");
            let r1 = d2s.recall_at[&1] * 100.0;
            s.push(r1);
            line.push_str(&format!(" {}={r1:.1} ({:.0}s)", v.label, t0.elapsed().as_secs_f64()));
        }
        println!("{line}");
    }
    let medians: Vec<String> =
        variants.iter().zip(scores).map(|(v, s)| format!("{}={:.1}", v.label, median(s))).collect();
    println!("median: {}", medians.join(" "));
    Ok(())
}
