//! The guide chapters from `book/` embedded as documentation, so every code
//! block in the book compiles and runs under `cargo test` as a doc-test.

macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $path))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(gaussian_processes, "gaussian-processes.md");
chapter!(local_model_trees, "local-model-trees.md");
chapter!(online_adaptation, "online-adaptation.md");
chapter!(plants, "plants.md");
chapter!(control_law, "control-law.md");
chapter!(patients_and_study, "patients-and-study.md");
chapter!(cli_and_formats, "cli-and-formats.md");
chapter!(performance, "performance.md");
