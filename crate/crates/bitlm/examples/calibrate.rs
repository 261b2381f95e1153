//! Protocol calibration: ratio of variant val-losses as training advances.

use bitlm::config::RunConfig;
use bitlm::data::synthetic_corpus;
use bitlm::model::InputKind;
use bitlm::runner::run_protocol;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1200);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4e-4);
    let corpus = synthetic_corpus(2_000_000, 0);
    let mut config = RunConfig::default();
    config.train.total_steps = steps;
    config.train.eval_every = 150;
    config.train.batch_size = 4;
    config.train.optim.peak_lr = lr;
    config.data.val_fraction = 0.02;
    config.seeds = vec![1, 2];
    config.recoder_seed = 11;
    let kinds = [InputKind::Learned, InputKind::FixedCode, InputKind::AffineRecoded];
    let outcomes = run_protocol(&config, &kinds, &corpus, None).unwrap();
    // Collect per-kind eval series averaged over seeds.
    let evals = |kind: InputKind| -> Vec<(u64, f64)> {
        let mut by_step: std::collections::BTreeMap<u64, Vec<f64>> = Default::default();
        for o in outcomes.iter().filter(|o| o.input_kind == kind) {
            for r in o.records.iter().filter(|r| r.val.is_some()) {
                by_step.entry(r.step).or_default().push(r.val.unwrap().1);
            }
        }
        by_step
            .into_iter()
            .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
            .collect()
    };
    let learned = evals(InputKind::Learned);
    let fixed = evals(InputKind::FixedCode);
    let affine = evals(InputKind::AffineRecoded);
    println!("step | ppl learned | ppl fixed | ppl affine | fixed/learned-1 | affine/fixed-1");
    for i in 0..learned.len() {
        let (s, pl) = learned[i];
        let pf = fixed[i].1;
        let pa = affine[i].1;
        println!(
            "{s:>5} | {pl:>11.3} | {pf:>9.3} | {pa:>10.3} | {:>+14.1}% | {:>+13.1}%",
            (pf / pl - 1.0) * 100.0,
            (pa / pf - 1.0) * 100.0
        );
    }
}
