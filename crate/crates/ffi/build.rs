use std::env;
use std::path::PathBuf;

fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").expect("manifest dir"));
    let header = crate_dir.join("include").join("capsfuse.h");
    std::fs::create_dir_all(header.parent().unwrap()).expect("create include dir");

    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            bindings.write_to_file(&header);
        }
        Err(cbindgen::Error::ParseSyntaxError { .. }) => {
            // In-progress source edits; keep the previous header so normal
            // builds are not interrupted.
        }
        Err(e) => panic!("cbindgen failed: {e}"),
    }
}
