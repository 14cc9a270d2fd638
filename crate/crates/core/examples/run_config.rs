//! Drive the library through a TOML run description, as the binary does.

use sidelab::cli::{parse_config, run};

const CONFIG: &str = r#"
command = "simulate"
seed = 5

[problem]
builtin = "smooth"

[solver]
points = 64
steps = 200
horizon = 0.25

[ensemble]
members = 4
"#;

fn main() -> sidelab::Result<()> {
    let mut cfg = parse_config(CONFIG)?;
    cfg.out = std::env::temp_dir().join("sidelab-run-config");
    println!("config hash {}", cfg.config_hash()?);
    let report = run(&cfg)?;
    println!("pass {} exit {:?}", report.pass, report.exit_code());
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    println!("{}", serde_json::to_string_pretty(&report.summary).expect("json"));
    Ok(())
}
