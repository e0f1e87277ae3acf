use sda_core::datagen::make_domains;
use sda_core::eval::{run_cell, ProtocolConfig};
use sda_core::metatrain::MetaConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(500);
    let seed: u64 = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(1);
    let task: usize = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(3);
    let domains = make_domains(4, 0).unwrap();
    let adapt_lr: f64 = args.get(4).and_then(|a| a.parse().ok()).unwrap_or(1e-3);
    let use_adam = args.get(5).map(|a| a == "adam").unwrap_or(false);
    let mut cfg = ProtocolConfig {
        meta: MetaConfig { iterations: iters, ..MetaConfig::default() },
        ..ProtocolConfig::default()
    };
    cfg.adapt.lr = adapt_lr;
    cfg.adapt.use_adam = use_adam;
    for variant in ["baseline", "ours_wo_adapt", "ours"] {
        let t0 = std::time::Instant::now();
        match run_cell(&cfg, &domains, task, variant, seed) {
            Ok(r) => println!(
                "task {task} seed {seed} {variant:14} HTER {:5.2}% AUC {:5.2}% ({:.1?})",
                r.hter * 100.0, r.auc * 100.0, t0.elapsed()
            ),
            Err(e) => println!("task {task} seed {seed} {variant:14} FAILED: {e}"),
        }
    }
}
