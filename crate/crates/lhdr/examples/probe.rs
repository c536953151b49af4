// Rough timing probe for the expensive acceptance paths.

use std::time::Instant;

use lhdr::bracket::ev_range;
use lhdr::head::{head_grad_check, train, HeadConfig, TrainOptions};
use lhdr::scenegen::{generate_corpus, SceneSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    if steps == 0 {
        let t0 = Instant::now();
        let (err, params) = head_grad_check(1).unwrap();
        println!("gradcheck: err {err:.3e}, {params} params, {:?}", t0.elapsed());
        return;
    }

    let corpus = generate_corpus(
        8,
        200,
        &SceneSpec { width: 64, height: 64, dr_target: 10.0, num_lights: 1, ..SceneSpec::default() },
    )
    .unwrap();
    let evs = ev_range(-7.0, 5.0, 1.0).unwrap();
    let opts = TrainOptions { steps, ..TrainOptions::default() };
    let t1 = Instant::now();
    let result = train(&corpus, &evs, &HeadConfig::default(), &opts).unwrap();
    let dt = t1.elapsed();
    let head_mean: f64 = result.trace[..100].iter().sum::<f64>() / 100.0;
    let tail_mean: f64 = result.trace[steps - 100..].iter().sum::<f64>() / 100.0;
    println!(
        "train {steps} steps: {dt:?} ({:.1} ms/step), loss {head_mean:.2} -> {tail_mean:.2}",
        dt.as_secs_f64() * 1000.0 / steps as f64
    );
}
