//! Text pipeline: tokenization, vocabulary, wire-format encoders, dataset
//! loading, and the synthetic corpus generator.
//!
//! Encoded sequences follow one fixed convention. Context encodings are
//! `[CLS] <s1> turn <s2> turn ... [SEP]` and truncate from the front
//! (oldest turns go first) while always keeping `[CLS]` and `[SEP]`.
//! Posterior encodings splice `<rsep> response` in before `[SEP]`. Decoder
//! input is `<bos> context <ksep> document <eos>` with the document
//! truncated from the end. The ten marker tokens own ids 0..10 in every
//! vocabulary.

mod data;
mod encode;
mod synthetic;
mod tokenizer;
mod vocab;

pub use data::{
    load_dataset, load_dialogs, load_documents, save_dataset, save_dialogs, save_documents,
    Corpus, DialogInstance, DocumentRecord, LoadReport, Speaker, Turn, CANNOT_ANSWER,
};
pub use encode::{
    decoder_context_ids, document_body_ids, encode_context, encode_context_response,
    encode_decoder_input, encode_document, encode_instance, Budgets, DocTable, InstanceEncoding,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use tokenizer::tokenize;
pub use vocab::{marker, TokenId, Vocabulary, MARKERS};
