fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    // The committed include/nestwave.h serves plain builds; this feature
    // regenerates it after an API change.
    #[cfg(feature = "generate-header")]
    {
        let crate_dir = std::env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR");
        let config = cbindgen::Config::from_file(
            std::path::Path::new(&crate_dir).join("cbindgen.toml"),
        )
        .expect("cbindgen.toml");
        cbindgen::Builder::new()
            .with_config(config)
            .with_crate(&crate_dir)
            .generate()
            .expect("header generation failed")
            .write_to_file(std::path::Path::new(&crate_dir).join("include/nestwave.h"));
    }
}
