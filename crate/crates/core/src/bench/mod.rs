//! Benchmark datasets, perturbation generators, and the evaluation run matrix.

mod dataset;
mod desk;
mod journal;
mod matrix;
mod perturb;

pub use dataset::{
    load_dataset, parse_item, read_dataset, write_dataset, BenchmarkItem, DatasetError, OptionChoice,
    SchemaTag, Span,
};
pub use desk::{desk_param_counts, mentions_harm, DeskPanel};
pub use matrix::{
    build_reports, context_supported, path_label, read_archive, replay, risk_score, run_matrix,
    write_archive, write_outputs, write_reports, ArchiveRecord, BackendProvider, BenchmarkSpec,
    CellFailure, CellKey, CellReport, ConfigBindings, Manifest, MatrixError, MatrixOptions,
    MatrixOutput, MethodSpec, Regime, RunMatrix, AGGREGATE_FILE, ARCHIVE_FILE, MANIFEST_FILE,
};
pub use perturb::{
    distractor_sentences, filler_words, perturb_adversarial, perturb_demographic, perturb_linguistic,
    perturb_linguistic_with_edits, DemographicOutcome, Edit, EditKind, PerturbError, SwapTable,
    EDIT_RATE,
};
