use std::{env, fs, path::PathBuf};

/// The netlib system packages on Debian-family images ship CBLAS symbols
/// inside libblas itself, with no separate libcblas. The LAPACK bindings
/// still emit `-lcblas`, so alias libblas under that name.
fn main() {
    if env::var("CARGO_CFG_TARGET_OS").as_deref() != Ok("linux") {
        return;
    }
    let candidates = [
        "/usr/lib/x86_64-linux-gnu/libcblas.so",
        "/usr/lib/libcblas.so",
    ];
    if candidates.iter().any(|p| fs::metadata(p).is_ok()) {
        return; // a real libcblas exists; nothing to do
    }
    let blas = ["/usr/lib/x86_64-linux-gnu/libblas.so", "/usr/lib/libblas.so"]
        .into_iter()
        .find(|p| fs::metadata(p).is_ok());
    let Some(blas) = blas else { return };
    let out = PathBuf::from(env::var("OUT_DIR").unwrap());
    let link = out.join("libcblas.so");
    let _ = fs::remove_file(&link);
    if std::os::unix::fs::symlink(blas, &link).is_ok() {
        println!("cargo:rustc-link-search=native={}", out.display());
    }
}
