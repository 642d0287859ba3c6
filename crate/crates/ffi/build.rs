use std::env;
use std::fs;
use std::path::PathBuf;

/// Regenerate `include/neurolens.h` from the extern "C" surface. The header
/// is committed, so the write only happens when the bindings actually
/// changed (keeps rebuilds quiet and lets consumers vendor the header).
fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").unwrap());
    let header = crate_dir.join("include").join("neurolens.h");

    let config = cbindgen::Config::from_file(crate_dir.join("cbindgen.toml"))
        .expect("cbindgen.toml is well-formed");
    let bindings = cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("C header generation failed");

    let mut rendered = Vec::new();
    bindings.write(&mut rendered);
    let current = fs::read(&header).unwrap_or_default();
    if current != rendered {
        fs::create_dir_all(header.parent().unwrap()).expect("create include/");
        fs::write(&header, rendered).expect("write include/neurolens.h");
    }
}
