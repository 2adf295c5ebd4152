// debug scratch — not part of the crate
use std::time::Instant;
use voltgate_core::eval::{evaluate, format_report};
use voltgate_core::features::FeatureMode;
use voltgate_core::grid::NetworkModel;
use voltgate_core::mlp::*;
use voltgate_core::scenario::*;

fn main() {
    let model = NetworkModel::benchmark();
    let cfg = DatasetConfig::default(); // 2000 + 2000, seed 7
    let t0 = Instant::now();
    let ds = generate_dataset(&model, &cfg).unwrap();
    println!(
        "dataset {} in {:.1?}; mal {:?} legit {:?}",
        ds.scenarios.len(),
        t0.elapsed(),
        ds.manifest.kind_counts_malicious,
        ds.manifest.kind_counts_legitimate
    );
    let (tx, ty, _) = ds.matrix(FeatureMode::Monitored, Split::Train);

    let t1 = Instant::now();
    let space = SearchSpace { trials: 25, seed: 3, ..Default::default() };
    let cv_cfg = TrainConfig { epochs: 100, learning_rate: 1e-2, ..Default::default() };
    let (best, log) = random_search(&tx, &ty, &space, FoldProtocol::PaperLiteral, 5, &cv_cfg).unwrap();
    let best_acc = log.iter().map(|t| t.mean_accuracy).fold(f64::MIN, f64::max);
    println!("search: best {:?} cv-acc {:.4} in {:.1?}", best, best_acc, t1.elapsed());

    let t2 = Instant::now();
    let final_cfg = TrainConfig { epochs: 300, learning_rate: 1e-2, ..Default::default() };
    let init = MlpModel::init(&best, tx[0].len(), FeatureMode::Monitored, final_cfg.seed);
    let m = train(init, &tx, &ty, None, &final_cfg).unwrap();
    println!("final train in {:.1?}", t2.elapsed());

    let report = evaluate(&m, &ds, 0.5).unwrap();
    println!("{}", format_report(&report));
    println!(
        "stealth recall: {:?}",
        report.recall_for_kind(AttackKind::StealthChord)
    );
    println!(
        "shift recall: {:?}, steepen recall: {:?}",
        report.recall_for_kind(AttackKind::Shift),
        report.recall_for_kind(AttackKind::Steepen)
    );
}
