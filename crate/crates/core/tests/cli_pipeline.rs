//! End-to-end CLI pipeline on a tiny configuration: gen -> train -> attn ->
//! segment -> report, plus the command-level error and exit-code contracts.

use std::path::Path;

use clap::Parser;
use crossmod::cli::{run, Cli};
use crossmod::config::RunConfig;
use crossmod::diffusion::UNetConfig;
use crossmod::policy::ModelConfig;
use crossmod::synthworld::GenConfig;
use crossmod::trainer::TrainConfig;
use crossmod::Error;

fn tiny_config(dir: &Path) -> String {
    let cfg = RunConfig {
        gen: GenConfig {
            count: 6,
            train_count: 4,
            ..GenConfig::default()
        },
        model: ModelConfig {
            unet: UNetConfig::tiny(),
            k_steps: 10,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            total_steps: 10,
            batch_size: 4,
            val_every: 5,
            val_draws: 8,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn cli(args: &[&str]) -> crossmod::Result<()> {
    run(Cli::parse_from(args))
}

fn assert_svg_well_formed(path: &Path) {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(
        text.starts_with("<?xml") && text.contains("<svg"),
        "{path:?} missing XML/SVG header"
    );
    assert!(text.trim_end().ends_with("</svg>"), "{path:?} unterminated");
    // every opened tag closes (self-closing or paired); cheap balance check
    let opens = text.matches('<').count();
    let closes = text.matches('>').count();
    assert_eq!(opens, closes, "{path:?} has unbalanced angle brackets");
}

#[test]
fn pipeline_and_error_contracts() {
    std::env::set_var("RAYON_NUM_THREADS", "1");
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path();
    let cfg = tiny_config(base);
    let arg = |p: &Path| p.to_str().unwrap().to_string();
    let data = base.join("data");
    let run_dir = base.join("run");
    let attn = base.join("attn");
    let seg = base.join("seg");
    let seg_k1 = base.join("seg_k1");
    let rep = base.join("report");

    cli(&["crossmod", "gen", "--config", &cfg, "--out", &arg(&data)]).unwrap();
    cli(&[
        "crossmod", "train", "--config", &cfg, "--data", &arg(&data), "--out", &arg(&run_dir),
    ])
    .unwrap();
    let ckpt = run_dir.join("checkpoint");
    assert!(run_dir.join("metrics.csv").exists());
    assert!(run_dir.join("train_result.json").exists());
    assert!(ckpt.join("manifest.json").exists());

    cli(&[
        "crossmod", "attn", "--ckpt", &arg(&ckpt), "--data", &arg(&data), "--traj", "0", "--out",
        &arg(&attn),
    ])
    .unwrap();
    assert!(attn.join("features.csv").exists());
    assert_svg_well_formed(&attn.join("allocation.svg"));

    cli(&[
        "crossmod", "segment", "--ckpt", &arg(&ckpt), "--data", &arg(&data), "--out", &arg(&seg),
    ])
    .unwrap();
    let seg_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(seg.join("segmentation.json")).unwrap())
            .unwrap();
    for field in ["k", "cluster_ids", "smoothed_ids", "boundaries", "permutation", "metrics"] {
        assert!(seg_json.get(field).is_some(), "segmentation.json missing {field}");
    }
    for metric in ["frame_accuracy", "nmi", "boundary_f1"] {
        assert!(seg_json["metrics"].get(metric).is_some(), "missing metric {metric}");
    }
    assert_svg_well_formed(&seg.join("scatter_label.svg"));
    assert_svg_well_formed(&seg.join("scatter_cluster.svg"));

    // k = 1 collapses everything into one cluster: NMI is 0 by convention
    cli(&[
        "crossmod", "segment", "--ckpt", &arg(&ckpt), "--data", &arg(&data), "--k", "1", "--out",
        &arg(&seg_k1),
    ])
    .unwrap();
    let k1: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(seg_k1.join("segmentation.json")).unwrap())
            .unwrap();
    assert_eq!(k1["metrics"]["nmi"].as_f64().unwrap(), 0.0);

    cli(&[
        "crossmod", "report", "--runs", &arg(&run_dir), "--out", &arg(&rep),
    ])
    .unwrap();
    assert!(rep.join("summary.json").exists());
    assert_svg_well_formed(&rep.join("loss_curves.svg"));

    // error contracts and exit codes
    let missing = base.join("nope");
    let err = cli(&[
        "crossmod", "report", "--runs", &arg(&missing), "--out", &arg(&base.join("r2")),
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 3, "missing run dir must be a data error");

    let bad_cfg = base.join("bad.json");
    std::fs::write(&bad_cfg, r#"{"seeed": 1}"#).unwrap();
    let err = cli(&[
        "crossmod", "gen", "--config", bad_cfg.to_str().unwrap(), "--out", &arg(&base.join("d2")),
    ])
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)), "unknown key must be a config error");
    assert_eq!(err.exit_code(), 2);

    let err = cli(&[
        "crossmod", "train", "--data", &arg(&missing), "--out", &arg(&base.join("r3")),
    ])
    .unwrap_err();
    assert_eq!(err.exit_code(), 3, "missing dataset must be a data error");
}
