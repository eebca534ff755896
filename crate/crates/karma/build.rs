use std::process::Command;

fn main() {
    let describe = Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|out| out.status.success())
        .and_then(|out| String::from_utf8(out.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_default();
    let describe = if describe.is_empty() { "unknown".to_string() } else { describe };
    println!("cargo:rustc-env=KARMA_GIT_DESCRIBE={describe}");
    println!("cargo:rerun-if-changed=build.rs");
}
