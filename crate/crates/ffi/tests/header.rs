use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include "avemo.h"
#include <stdio.h>

int main(void) {
    size_t sizes[5] = {1200, 1200, 1200, 1200, 1200};
    size_t kept = 0;
    AvemoStatus s = avemo_truncate_history(sizes, 5, 0, 256, 4096, &kept);
    if (s != AVEMO_STATUS_OK || kept != 3) return 1;
    double v = 0.0;
    s = avemo_metric(AVEMO_METRIC_BLEU1, "a b c", "a b c", &v);
    if (s != AVEMO_STATUS_OK || v != 1.0) return 2;
    AvemoEngine *engine = NULL;
    s = avemo_engine_open(NULL, NULL, &engine);
    if (s != AVEMO_STATUS_NULL_ARGUMENT || avemo_last_error() == NULL) return 3;
    printf("%s\n", avemo_version());
    return 0;
}
"#;

fn compiler() -> Option<String> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| {
            Command::new(c)
                .arg("--version")
                .output()
                .is_ok_and(|o| o.status.success())
        })
        .map(str::to_string)
}

#[test]
fn header_compiles_as_c() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("avemo.h").exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn c_program_links_against_the_static_library() {
    let Some(cc) = compiler() else {
        return;
    };
    // Integration tests sit in target/<profile>/deps; the static library one level up.
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().and_then(|d| d.parent()).unwrap().join("libavemo_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping link check", lib.display());
        return;
    }
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    let bin = dir.path().join("probe");
    std::fs::write(&src, PROGRAM).unwrap();
    let out = Command::new(&cc)
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
