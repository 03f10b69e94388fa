//! `desk_run <seed> [key=value ...]`: one desk-scale run, printing the gain.
use derain_core::desk::{prepare_desk_data, run_desk, toy_config, DESK_ITERATIONS};
use derain_core::training::apply_override;

fn main() {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().unwrap()).unwrap_or(0);
    let overrides: Vec<String> = args.collect();
    let root = std::env::temp_dir().join("derain-desk-data");
    if !root.join("manifest.json").exists() {
        prepare_desk_data(&root, 0).unwrap();
    }
    let base = toy_config(seed, &root);
    let mut table: toml::Table = toml::from_str(&base.to_toml_string()).unwrap();
    let mut iterations = DESK_ITERATIONS;
    for o in &overrides {
        if let Some(v) = o.strip_prefix("iterations=") {
            iterations = v.parse().unwrap();
            continue;
        }
        apply_override(&mut table, o).unwrap();
    }
    let cfg = derain_core::training::TrainConfig::from_toml_str(&toml::to_string(&table).unwrap()).unwrap();
    let tag = overrides.join(",").replace(['/', '='], "_");
    let out = std::env::temp_dir().join(format!("derain-desk-{seed}-{tag}"));
    let t = std::time::Instant::now();
    let o = run_desk(&cfg, &out, iterations).unwrap();
    println!(
        "seed={seed} {tag} gain={:.3} psnr={:.3} input={:.3} ssim={:.4} input_ssim={:.4} time={:?}",
        o.gain_db(),
        o.report.mean.psnr_db,
        o.report.mean.input_psnr_db,
        o.report.mean.ssim,
        o.report.mean.input_ssim,
        t.elapsed()
    );
}
