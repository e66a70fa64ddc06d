#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny")
}

/// Run the binary with `SASOW_SEED` cleared unless `seed` is given.
pub fn run_with_seed(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sasow"));
    cmd.args(args).env_remove("SASOW_SEED").env("RUST_LOG", "error");
    if let Some(s) = seed {
        cmd.env("SASOW_SEED", s);
    }
    cmd.output().expect("binary runs")
}

pub fn run(args: &[&str]) -> Output {
    run_with_seed(args, None)
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Panic with the captured stderr unless the command succeeded.
pub fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}
