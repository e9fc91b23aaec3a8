use loggp::gp::Hyperparameters;
use loggp::tree::{LogGpTree, TreeConfig};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let hp = Hyperparameters::new(1.0, vec![0.1, 0.1, 0.1, 0.1, 1.0, 1.0, 10.0], 0.3).unwrap();
    let cfg = TreeConfig::new(hp);
    let mut tree = LogGpTree::new(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 6000usize;
    let mut times = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * 5e-3;
        let x: Vec<f64> = vec![
            rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2),
            rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0),
            t,
        ];
        let y = 5.0 * (3.0 * x[0]).sin() + x[2];
        let leaves_before = tree.leaf_count();
        let t0 = Instant::now();
        tree.insert(&x, y).unwrap();
        let dt = t0.elapsed().as_secs_f64() * 1e3;
        let split = tree.leaf_count() != leaves_before;
        times.push((dt, k, split));
    }
    times.sort_by(|a, b| b.0.total_cmp(&a.0));
    println!("worst 15 ticks (ms, idx, split?):");
    for row in &times[..15] {
        println!("  {:8.3} ms  k={:<6} split={}", row.0, row.1, row.2);
    }
    let meds = {
        let mut t: Vec<f64> = times.iter().map(|r| r.0).collect();
        t.sort_by(f64::total_cmp);
        (t[t.len()/2], t[(t.len() as f64 * 0.99) as usize])
    };
    println!("median {:.3} ms  p99 {:.3} ms  leaves={}", meds.0, meds.1, tree.leaf_count());
}
