use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "interleave.h"

int main(void) {
    IlCodec *codec = NULL;
    if (il_codec_new(1, 2, 2, 3, &codec) != IL_STATUS_OK) return 1;
    size_t grid[3];
    if (il_codec_token_grid(codec, 1, 4, 4, grid) != IL_STATUS_OK) return 2;
    float px[48], tokens[48], back[48];
    for (int i = 0; i < 48; i++) px[i] = (float)i / 24.0f - 1.0f;
    size_t n = 0;
    if (il_codec_tokenize(codec, px, 1, 4, 4, tokens, 48, &n) != IL_STATUS_OK || n != 48) return 3;
    if (il_codec_detokenize(codec, tokens, 1, 1, 1, back, 48, &n) != IL_STATUS_OK) return 4;
    for (int i = 0; i < 48; i++) {
        float d = back[i] - px[i];
        if (d > 1e-6f || d < -1e-6f) return 5;
    }
    if (il_codec_token_grid(codec, 1, 3, 4, grid) != IL_STATUS_DIMENSION) return 6;
    if (strlen(il_last_error()) == 0) return 7;
    il_codec_free(codec);
    printf("%s\n", il_version());
    return 0;
}
"#;

#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libinterleave.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, PROGRAM).unwrap();
    let bin = dir.path().join("smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
