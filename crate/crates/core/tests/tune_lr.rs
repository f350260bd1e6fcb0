use ecgtwin_core::config::Config;
use ecgtwin_core::data::corpus::build_corpus;
use ecgtwin_core::trainer::train;

#[test]
#[ignore]
fn lr_grid() {
    for lr in [3e-3, 1e-3, 3e-4] {
        let mut cfg = Config::desk();
        cfg.learning_rate = lr;
        cfg.epochs = 10;
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        let run = dir.path().join("run");
        let manifest = build_corpus(&cfg, &corpus).unwrap();
        match train(&cfg, &manifest, &run) {
            Ok(report) => {
                let curve: Vec<String> =
                    report.val_rec.iter().map(|v| format!("{v:.1}")).collect();
                println!("lr {lr}: {}", curve.join(" "));
            }
            Err(e) => println!("lr {lr}: error {e}"),
        }
    }
}
