//! Label spaces, prompts and the toy text encoder.

mod encoder;
mod label_space;
mod prompt;

pub use encoder::{encode_text, tokenize, SynonymMap, TextEncoder, TextQuery};
pub use label_space::{
    normalize_label, sample_negative_labels, unify_label_spaces, DatasetVocabulary, LabelSpace,
    Triplet, MIN_NEGATIVES,
};
pub use prompt::{
    conjugate_ing, parse_templates, prompt_object, prompt_relation, templates, PromptTriplet,
    NO_INTERACTION,
};
