//! Drive the staged pipeline programmatically from a TOML config: the same
//! path the `resweb` binary takes, ending with the verification table.

use resweb::pipeline::{RunConfig, Workspace, STAGES};

fn main() {
    let config_path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/resweb/configs/flagship.toml".to_string());
    let config = RunConfig::from_path(std::path::Path::new(&config_path)).expect("config");
    let out = std::env::temp_dir().join("resweb-full-pipeline");
    let _ = std::fs::remove_dir_all(&out);
    let mut ws = Workspace::open(config, Some(&out)).expect("workspace");
    for stage in STAGES {
        let cached = ws.run_stage(stage).expect(stage);
        println!("stage {stage}: {}", if cached { "cached" } else { "done" });
    }
    let verify: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.artifact_path("verify.json")).unwrap())
            .unwrap();
    println!("verify.json:\n{}", serde_json::to_string_pretty(&verify).unwrap());
    println!("artifacts in {}", ws.out_dir.display());
}
