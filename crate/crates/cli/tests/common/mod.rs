#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

pub fn pfolio() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pfolio"))
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    fn from(out: Output) -> Run {
        Run {
            code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    }

    /// Directory printed as the first token of the first stdout line.
    pub fn dir(&self) -> PathBuf {
        let line = self.stdout.lines().next().unwrap_or_else(|| panic!("no stdout; stderr: {}", self.stderr));
        PathBuf::from(line.split_whitespace().next().unwrap())
    }

    pub fn error_json(&self) -> Value {
        let lines: Vec<&str> = self.stderr.lines().filter(|l| l.starts_with('{')).collect();
        assert_eq!(lines.len(), 1, "stderr: {}", self.stderr);
        serde_json::from_str(lines[0]).unwrap()
    }
}

/// A temp directory holding a synthetic market, its ingested panel and a config.
pub struct Workspace {
    pub tmp: TempDir,
}

pub const TRAIN_START: &str = "2020-01-01";
pub const TRAIN_END: &str = "2020-12-01";
pub const VALIDATION_END: &str = "2021-01-26";
pub const TEST_START: &str = "2021-01-27";
pub const TEST_END: &str = "2021-07-13";

impl Workspace {
    /// 400 business days of the five-asset drift market, ingested to `panel.json`.
    pub fn new() -> Workspace {
        let ws = Workspace {
            tmp: tempfile::tempdir().unwrap(),
        };
        let csv = ws.path("market.csv");
        let r = ws.run(&["synth", "--out", csv.to_str().unwrap(), "--days", "400"]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        let panel = ws.path("panel.json");
        let r = ws.run(&["ingest", "--csv", csv.to_str().unwrap(), "--out", panel.to_str().unwrap()]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        ws.write_config("config.json", &ws.config());
        ws
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    pub fn config(&self) -> Value {
        json!({
            "panel": "panel.json",
            "split": {
                "train_start": TRAIN_START,
                "train_end": TRAIN_END,
                "validation_end": VALIDATION_END,
                "test_start": TEST_START,
                "test_end": TEST_END
            },
            "train": { "epochs": 2, "hidden": 8, "lr": 0.001, "seed": 3 },
            "sigma": [0.00001, 0.000015, 0.001],
            "improve": { "steps": 5 },
            "output_dir": "runs"
        })
    }

    pub fn write_config(&self, name: &str, cfg: &Value) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
        p
    }

    pub fn run(&self, args: &[&str]) -> Run {
        Run::from(pfolio().args(args).current_dir(self.tmp.path()).output().unwrap())
    }

    /// Runs a config-driven subcommand against `config.json`.
    pub fn cmd(&self, sub: &str, extra: &[&str]) -> Run {
        let mut args = vec![sub, "--config", "config.json"];
        args.extend_from_slice(extra);
        self.run(&args)
    }

    pub fn ok(&self, sub: &str, extra: &[&str]) -> PathBuf {
        let r = self.cmd(sub, extra);
        assert_eq!(r.code, 0, "{sub} failed: {}", r.stderr);
        let d = r.dir();
        if d.is_absolute() {
            d
        } else {
            self.tmp.path().join(d)
        }
    }
}

pub fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

/// Every file below `dir`, as sorted relative paths.
pub fn files(dir: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, d: &Path, out: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
