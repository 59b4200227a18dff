use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::data::{DialogInstance, DocumentRecord, Turn};
use super::vocab::{marker, TokenId, Vocabulary};
use crate::error::{Error, Result};

/// Token-length budgets for the three encoded segments.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    pub context: usize,
    pub document: usize,
    pub response: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            context: 64,
            document: 64,
            response: 32,
        }
    }
}

/// Flattens turns into `<s1> tok.. <s2> tok..` and keeps the trailing
/// `keep` ids: truncation drops the oldest turns first.
fn context_middle(turns: &[Turn], vocab: &Vocabulary, keep: usize) -> Vec<TokenId> {
    let mut middle = Vec::new();
    for turn in turns {
        middle.push(turn.speaker.marker_id());
        middle.extend(vocab.encode(&turn.tokens));
    }
    if middle.len() > keep {
        middle.drain(..middle.len() - keep);
    }
    middle
}

/// Document body truncated from the end (the leading tokens survive).
pub fn document_body_ids(doc_tokens: &[String], vocab: &Vocabulary, budgets: &Budgets) -> Vec<TokenId> {
    let keep = budgets.document.saturating_sub(2);
    let mut ids = vocab.encode(doc_tokens);
    ids.truncate(keep);
    ids
}

/// Prior retriever input: `[CLS] <s1> turn ... [SEP]`, at most
/// `budgets.context` ids, oldest turns dropped first.
pub fn encode_context(turns: &[Turn], vocab: &Vocabulary, budgets: &Budgets) -> Vec<TokenId> {
    let middle = context_middle(turns, vocab, budgets.context.saturating_sub(2));
    let mut ids = Vec::with_capacity(middle.len() + 2);
    ids.push(marker::CLS);
    ids.extend(middle);
    ids.push(marker::SEP);
    ids
}

/// Posterior retriever input: the context encoding with
/// `<rsep> response` spliced in before `[SEP]`. Context truncation drops
/// oldest turns; the response is only capped to its own budget, never
/// squeezed by the context.
pub fn encode_context_response(
    turns: &[Turn],
    response_tokens: &[String],
    vocab: &Vocabulary,
    budgets: &Budgets,
) -> Vec<TokenId> {
    let middle = context_middle(turns, vocab, budgets.context.saturating_sub(2));
    let mut resp = vocab.encode(response_tokens);
    resp.truncate(budgets.response);
    let mut ids = Vec::with_capacity(middle.len() + resp.len() + 3);
    ids.push(marker::CLS);
    ids.extend(middle);
    ids.push(marker::RSEP);
    ids.extend(resp);
    ids.push(marker::SEP);
    ids
}

/// The context segment the decoder pools over: turn markers and turn
/// tokens, no `[CLS]`/`[SEP]`, same front truncation as the retriever
/// encodings.
pub fn decoder_context_ids(turns: &[Turn], vocab: &Vocabulary, budgets: &Budgets) -> Vec<TokenId> {
    context_middle(turns, vocab, budgets.context.saturating_sub(2))
}

/// Generator input: `<bos> context <ksep> document <eos>`.
pub fn encode_decoder_input(
    turns: &[Turn],
    doc_tokens: &[String],
    vocab: &Vocabulary,
    budgets: &Budgets,
) -> Vec<TokenId> {
    let ctx = decoder_context_ids(turns, vocab, budgets);
    let doc = document_body_ids(doc_tokens, vocab, budgets);
    let mut ids = Vec::with_capacity(ctx.len() + doc.len() + 3);
    ids.push(marker::BOS);
    ids.extend(ctx);
    ids.push(marker::KSEP);
    ids.extend(doc);
    ids.push(marker::EOS);
    ids
}

/// Document encoder input: `[CLS] document [SEP]`, truncated from the end
/// to the document budget.
pub fn encode_document(doc_tokens: &[String], vocab: &Vocabulary, budgets: &Budgets) -> Vec<TokenId> {
    let body = document_body_ids(doc_tokens, vocab, budgets);
    let mut ids = Vec::with_capacity(body.len() + 2);
    ids.push(marker::CLS);
    ids.extend(body);
    ids.push(marker::SEP);
    ids
}

/// One dialog instance encoded for every model input it can feed, so the
/// training loop never touches strings.
#[derive(Debug, Clone)]
pub struct InstanceEncoding {
    /// `[CLS] context [SEP]` for the prior retriever.
    pub prior_input: Vec<TokenId>,
    /// `[CLS] context <rsep> response [SEP]` for the posterior retriever.
    pub posterior_input: Vec<TokenId>,
    /// Bare context segment the generator pools over.
    pub generator_context: Vec<TokenId>,
    /// Response ids capped to the response budget, `<eos>`-terminated.
    pub target: Vec<TokenId>,
    pub gold_doc_id: Option<String>,
    /// Raw response tokens, kept as the generation reference.
    pub response_tokens: Vec<String>,
}

pub fn encode_instance(
    inst: &DialogInstance,
    vocab: &Vocabulary,
    budgets: &Budgets,
) -> InstanceEncoding {
    let mut target = vocab.encode(&inst.response_tokens);
    target.truncate(budgets.response);
    target.push(marker::EOS);
    InstanceEncoding {
        prior_input: encode_context(&inst.turns, vocab, budgets),
        posterior_input: encode_context_response(&inst.turns, &inst.response_tokens, vocab, budgets),
        generator_context: decoder_context_ids(&inst.turns, vocab, budgets),
        target,
        gold_doc_id: inst.gold_doc_id.clone(),
        response_tokens: inst.response_tokens.clone(),
    }
}

/// Generator-side document bodies keyed by document id.
#[derive(Debug, Clone)]
pub struct DocTable {
    ids: Vec<String>,
    bodies: Vec<Vec<TokenId>>,
    by_id: HashMap<String, usize>,
}

impl DocTable {
    pub fn build(
        documents: &[DocumentRecord],
        vocab: &Vocabulary,
        budgets: &Budgets,
    ) -> Result<Self> {
        let mut ids = Vec::with_capacity(documents.len());
        let mut bodies = Vec::with_capacity(documents.len());
        let mut by_id = HashMap::with_capacity(documents.len());
        for (i, doc) in documents.iter().enumerate() {
            if by_id.insert(doc.id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate document id {}", doc.id)));
            }
            ids.push(doc.id.clone());
            bodies.push(document_body_ids(&doc.tokens, vocab, budgets));
        }
        Ok(DocTable { ids, bodies, by_id })
    }

    pub fn body(&self, doc_id: &str) -> Result<&[TokenId]> {
        self.by_id
            .get(doc_id)
            .map(|&i| self.bodies[i].as_slice())
            .ok_or_else(|| Error::invalid(format!("unknown document id {}", doc_id)))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::data::Speaker;

    fn turn(speaker: Speaker, words: &[&str]) -> Turn {
        Turn {
            speaker,
            text: words.join(" "),
            tokens: words.iter().map(|w| w.to_string()).collect(),
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(["a", "b", "c", "d", "e"].into_iter(), 1)
    }

    #[test]
    fn context_encoding_wraps_turns_with_markers() {
        let v = vocab();
        let turns = vec![turn(Speaker::S1, &["a"]), turn(Speaker::S2, &["b", "c"])];
        let ids = encode_context(&turns, &v, &Budgets::default());
        assert_eq!(
            ids,
            vec![
                marker::CLS,
                marker::S1,
                v.id_of("a"),
                marker::S2,
                v.id_of("b"),
                v.id_of("c"),
                marker::SEP
            ]
        );
    }

    #[test]
    fn context_truncates_oldest_turn_first_keeping_cls_sep() {
        // Budget 4 leaves room for two middle ids, so the oldest turn is
        // dropped and the newest survives.
        let v = vocab();
        let turns = vec![turn(Speaker::S1, &["a"]), turn(Speaker::S2, &["b"])];
        let tight = Budgets {
            context: 4,
            ..Budgets::default()
        };
        let ids = encode_context(&turns, &v, &tight);
        assert_eq!(ids, vec![marker::CLS, marker::S2, v.id_of("b"), marker::SEP]);
    }

    #[test]
    fn appending_a_turn_only_extends_the_suffix_before_sep() {
        let v = vocab();
        let mut turns = vec![turn(Speaker::S1, &["a", "b"])];
        let before = encode_context(&turns, &v, &Budgets::default());
        turns.push(turn(Speaker::S2, &["c"]));
        let after = encode_context(&turns, &v, &Budgets::default());
        assert_eq!(before[..before.len() - 1], after[..before.len() - 1]);
        assert_eq!(*after.last().unwrap(), marker::SEP);
    }

    #[test]
    fn posterior_encoding_inserts_response_before_sep() {
        let v = vocab();
        let turns = vec![turn(Speaker::S1, &["a"])];
        let resp = vec!["d".to_string(), "e".to_string()];
        let ids = encode_context_response(&turns, &resp, &v, &Budgets::default());
        assert_eq!(
            ids,
            vec![
                marker::CLS,
                marker::S1,
                v.id_of("a"),
                marker::RSEP,
                v.id_of("d"),
                v.id_of("e"),
                marker::SEP
            ]
        );
    }

    #[test]
    fn context_pressure_never_drops_response_tokens() {
        let v = vocab();
        let long: Vec<&str> = std::iter::repeat("a").take(100).collect();
        let turns = vec![turn(Speaker::S1, &long)];
        let resp = vec!["d".to_string()];
        let tight = Budgets {
            context: 8,
            ..Budgets::default()
        };
        let ids = encode_context_response(&turns, &resp, &v, &tight);
        let rsep_pos = ids.iter().position(|&i| i == marker::RSEP).unwrap();
        assert_eq!(&ids[rsep_pos..], &[marker::RSEP, v.id_of("d"), marker::SEP]);
        assert!(rsep_pos <= 7);
    }

    #[test]
    fn decoder_input_has_bos_ksep_eos_frame() {
        let v = vocab();
        let turns = vec![turn(Speaker::S1, &["a"])];
        let doc = vec!["b".to_string(), "c".to_string()];
        let ids = encode_decoder_input(&turns, &doc, &v, &Budgets::default());
        assert_eq!(
            ids,
            vec![
                marker::BOS,
                marker::S1,
                v.id_of("a"),
                marker::KSEP,
                v.id_of("b"),
                v.id_of("c"),
                marker::EOS
            ]
        );
    }

    #[test]
    fn document_truncates_from_the_end() {
        let v = vocab();
        let doc: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let tight = Budgets {
            document: 4,
            ..Budgets::default()
        };
        assert_eq!(document_body_ids(&doc, &v, &tight), vec![v.id_of("a"), v.id_of("b")]);
        let ids = encode_document(&doc, &v, &tight);
        assert_eq!(ids, vec![marker::CLS, v.id_of("a"), v.id_of("b"), marker::SEP]);
    }

    #[test]
    fn instance_encoding_agrees_with_the_piecewise_encoders() {
        let v = vocab();
        let budgets = Budgets::default();
        let inst = DialogInstance {
            id: "q-1".into(),
            turns: vec![turn(Speaker::S1, &["a", "b"])],
            response_text: "d e".into(),
            response_tokens: vec!["d".into(), "e".into()],
            gold_doc_id: Some("doc-7".into()),
        };
        let enc = encode_instance(&inst, &v, &budgets);
        assert_eq!(enc.prior_input, encode_context(&inst.turns, &v, &budgets));
        assert_eq!(
            enc.posterior_input,
            encode_context_response(&inst.turns, &inst.response_tokens, &v, &budgets)
        );
        assert_eq!(enc.generator_context, decoder_context_ids(&inst.turns, &v, &budgets));
        assert_eq!(enc.target, vec![v.id_of("d"), v.id_of("e"), marker::EOS]);
        assert_eq!(enc.gold_doc_id.as_deref(), Some("doc-7"));
    }

    #[test]
    fn target_is_capped_to_the_response_budget_before_eos() {
        let v = vocab();
        let tight = Budgets {
            response: 2,
            ..Budgets::default()
        };
        let inst = DialogInstance {
            id: "q-1".into(),
            turns: vec![turn(Speaker::S1, &["a"])],
            response_text: "c d e".into(),
            response_tokens: vec!["c".into(), "d".into(), "e".into()],
            gold_doc_id: None,
        };
        let enc = encode_instance(&inst, &v, &tight);
        assert_eq!(enc.target, vec![v.id_of("c"), v.id_of("d"), marker::EOS]);
    }

    #[test]
    fn doc_table_indexes_bodies_by_id() {
        let v = vocab();
        let docs = vec![
            DocumentRecord {
                id: "doc-0".into(),
                text: "a b".into(),
                tokens: vec!["a".into(), "b".into()],
            },
            DocumentRecord {
                id: "doc-1".into(),
                text: "c".into(),
                tokens: vec!["c".into()],
            },
        ];
        let table = DocTable::build(&docs, &v, &Budgets::default()).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table.body("doc-1").unwrap(), &[v.id_of("c")]);
        assert!(table.body("doc-9").is_err());

        let dup = vec![docs[0].clone(), docs[0].clone()];
        assert!(DocTable::build(&dup, &v, &Budgets::default()).is_err());
    }
}
