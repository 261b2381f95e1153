//! Quick throughput probe for a desk-scale training step.

use bitlm::data::{synthetic_corpus, tokenize_bytes, BatchStream};
use bitlm::model::{init_model, InputInterface, InputKind, ModelConfig};
use bitlm::optim::{train_step, OptimConfig, Schedule, TrainState};
use std::time::Instant;

fn main() {
    let config = ModelConfig::desk_default(InputKind::FixedCode);
    let interface = InputInterface::for_config(&config, None).unwrap();
    let params = init_model(&config, 1).unwrap();
    println!("trainable params: {}", params.trainable_count());
    let docs: Vec<Vec<u32>> = synthetic_corpus(400_000, 1).iter().map(tokenize_bytes).collect();
    for batch_size in [4usize, 8] {
        let mut stream = BatchStream::new(docs.clone(), config.context_len, batch_size, 1).unwrap();
        let mut state = TrainState::new(params.clone(), OptimConfig::default(), Schedule::with_scaled_warmup(1000), 1);
        // warm up
        for _ in 0..3 {
            let b = stream.next_batch();
            train_step(&mut state, &interface, &config, &b).unwrap();
        }
        let n = 15;
        let start = Instant::now();
        for _ in 0..n {
            let b = stream.next_batch();
            train_step(&mut state, &interface, &config, &b).unwrap();
        }
        let dt = start.elapsed().as_secs_f64() / n as f64;
        let tokens = batch_size * config.context_len;
        println!(
            "B={batch_size}: {:.1} ms/step, {:.0} tokens/s  (1000 steps = {:.1} min)",
            dt * 1e3,
            tokens as f64 / dt,
            dt * 1000.0 / 60.0
        );
    }
}
