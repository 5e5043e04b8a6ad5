//! Writes a self-contained scripted demo — tasks, backend script, and a CLI
//! config wired to them — into a directory, ready for the `concise` binary.
//!
//! ```sh
//! cargo run -p concise --example materialize-demo -- demo
//! cargo run -p concise-cli -- --config demo/config.json --out demo/out \
//!     build-dataset --tasks demo/tasks.jsonl
//! ```

use std::io::Error;
use std::path::PathBuf;

use concise::jsonl::write_jsonl;
use concise::testkit::demo_corpus;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "demo".into()));
    std::fs::create_dir_all(&dir)?;

    let set = demo_corpus(20);
    write_jsonl(&dir.join("tasks.jsonl"), &set.tasks).map_err(Error::other)?;
    std::fs::write(dir.join("script.json"), set.backend.to_json())?;

    let config = serde_json::json!({
        "backend": {"kind": "script", "path": dir.join("script.json")},
        "pipeline": set.config,
        "sampling": {"plain_samples": set.plain_samples_per_task},
    });
    let rendered = serde_json::to_string_pretty(&config).map_err(Error::other)?;
    std::fs::write(dir.join("config.json"), rendered + "\n")?;

    println!("wrote tasks.jsonl, script.json, config.json under {}", dir.display());
    Ok(())
}
