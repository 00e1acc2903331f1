//! Procedural stand-in for an industrial defect dataset.

mod dataset;
mod defect;
mod image;
mod prompt;
mod texture;
mod vocab;

pub use dataset::{
    build_dataset, Dataset, DatasetConfig, ReferencePairing, Sample, Split, MANIFEST,
    MANIFEST_HEADER,
};
pub use defect::{inject_defect, rasterize, DefectKind, DefectSpec, Geometry};
pub use image::{snap, Image, Mask};
pub use prompt::{make_prompt_pair, reference_caption, target_caption, PromptPair, TokenSpan};
pub use texture::{gen_normal, TextureKind};
pub use vocab::{TokenId, Vocab, TEMPLATE_PREFIX};
