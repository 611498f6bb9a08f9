use std::path::PathBuf;
use std::{env, fs};

// Embeds a weight binary named by EDGECNN_BAKED_WEIGHTS. An empty blob means
// no baked set.
fn main() {
    println!("cargo:rerun-if-env-changed=EDGECNN_BAKED_WEIGHTS");
    let out =
        PathBuf::from(env::var_os("OUT_DIR").expect("OUT_DIR set by cargo")).join("baked.bin");
    let (bytes, id) = match env::var_os("EDGECNN_BAKED_WEIGHTS") {
        Some(p) if !p.is_empty() => {
            let path = PathBuf::from(p);
            println!("cargo:rerun-if-changed={}", path.display());
            let bytes = fs::read(&path)
                .unwrap_or_else(|e| panic!("cannot read baked weights {}: {e}", path.display()));
            let id = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            (bytes, id)
        }
        _ => (Vec::new(), String::new()),
    };
    fs::write(&out, bytes).expect("write baked blob");
    println!("cargo:rustc-env=EDGECNN_BAKED_ID={id}");
}
