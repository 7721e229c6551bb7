//! Naive fine-tuning against the full method on a config, over several seeds.
//!
//! `cargo run --release -p contrec-core --example forgetting -- configs/desk.json 3`

use std::time::Instant;

use contrec_core::config::RunConfig;
use contrec_core::metrics::{backward_transfer, incremental_iou};
use contrec_core::pipeline::train_stream;
use contrec_core::shapes::build_sessions;

fn main() -> contrec_core::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "configs/desk.json".into());
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let base = RunConfig::load(path.as_ref())?;
    let start = Instant::now();
    let mut acc = [[0.0; 3]; 2];
    for seed in 0..seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let data = build_sessions(&cfg.data, seed)?;
        for (v, (ratio, kl)) in [(0.0, 0.0), (base.train.replay_ratio, base.train.kl_weight)]
            .into_iter()
            .enumerate()
        {
            let mut c = cfg.clone();
            c.train.replay_ratio = ratio;
            c.train.kl_weight = kl;
            let out = train_stream(&c, &data, None)?;
            let m = &out.matrix;
            let (bwt, iiou) = (backward_transfer(m)?, incremental_iou(m)?);
            let s0 = m.cell(m.sessions() - 1, 0).unwrap_or(f64::NAN);
            let name = if v == 0 { "naive" } else { "full " };
            println!(
                "seed {seed} {name}: bwt {bwt:+.4} i-iou {iiou:.4} s0-final {s0:.4}  ({:.0}s)",
                start.elapsed().as_secs_f64()
            );
            for i in 0..m.sessions() {
                println!("    {:?}", m.row(i).unwrap_or(&[]));
            }
            acc[v][0] += bwt / seeds as f64;
            acc[v][1] += iiou / seeds as f64;
            acc[v][2] += s0 / seeds as f64;
        }
    }
    println!(
        "mean naive: bwt {:+.4} i-iou {:.4} s0 {:.4}",
        acc[0][0], acc[0][1], acc[0][2]
    );
    println!(
        "mean full : bwt {:+.4} i-iou {:.4} s0 {:.4}",
        acc[1][0], acc[1][1], acc[1][2]
    );
    println!(
        "deltas: bwt {:+.4} i-iou {:+.4} s0 {:+.4}  total {:.0}s",
        acc[1][0] - acc[0][0],
        acc[1][1] - acc[0][1],
        acc[1][2] - acc[0][2],
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
