use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Corpus, DialogInstance, DocumentRecord, Speaker, Turn};
use super::tokenizer::tokenize;
use super::vocab::MARKERS;
use crate::error::{Error, Result};

/// Parameters of the synthetic key/fact corpus.
///
/// Documents are grouped into pairs that share their key tokens but carry
/// distinct fact tokens, so a context (which mentions only a key) narrows
/// retrieval to a pair while the response (which reveals the fact) pins the
/// exact document. That asymmetry is what the posterior retriever can
/// exploit and the prior cannot.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_documents: usize,
    pub facts_per_document: usize,
    /// Upper bound on distinct tokens (markers included) the generated
    /// corpus may need; generation fails if the requested layout cannot fit.
    pub vocab_size: usize,
    pub train_instances: usize,
    pub val_instances: usize,
    pub test_instances: usize,
    /// Probability that an instance gets an unrelated leading exchange.
    pub distractor_turn_rate: f64,
    /// When set, the documents asked about in the test split are disjoint
    /// from those asked about in train/val, which is what the memorization
    /// study wants to stress.
    pub held_out_docs: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_documents: 200,
            facts_per_document: 1,
            vocab_size: 400,
            train_instances: 1000,
            val_instances: 200,
            test_instances: 200,
            distractor_turn_rate: 0.3,
            held_out_docs: false,
            seed: 0,
        }
    }
}

const FILLER: [&str; 10] = ["what", "about", "it", "is", "hello", "hi", "there", "?", ".", ";"];

impl SyntheticSpec {
    /// Distinct tokens the generated corpus will contain, markers included.
    pub fn required_vocab(&self) -> usize {
        let pairs = (self.num_documents + 1) / 2;
        let keys = pairs * self.facts_per_document;
        let facts = self.num_documents * self.facts_per_document;
        MARKERS.len() + keys + facts + FILLER.len()
    }

    fn validate(&self) -> Result<()> {
        if self.num_documents < 2 {
            return Err(Error::invalid("synthetic corpus needs at least 2 documents"));
        }
        if self.facts_per_document == 0 {
            return Err(Error::invalid("facts_per_document must be positive"));
        }
        if !(0.0..=1.0).contains(&self.distractor_turn_rate) {
            return Err(Error::invalid("distractor_turn_rate must be in [0, 1]"));
        }
        let required = self.required_vocab();
        if self.vocab_size < required {
            return Err(Error::invalid(format!(
                "vocab_size {} cannot host the synthetic corpus: {} documents x {} facts need {} \
                 tokens ({} markers, {} keys, {} fact tokens, {} filler words)",
                self.vocab_size,
                self.num_documents,
                self.facts_per_document,
                required,
                MARKERS.len(),
                ((self.num_documents + 1) / 2) * self.facts_per_document,
                self.num_documents * self.facts_per_document,
                FILLER.len(),
            )));
        }
        if self.held_out_docs && self.num_documents < 4 {
            return Err(Error::invalid(
                "held_out_docs needs at least 4 documents to reserve a test pool",
            ));
        }
        Ok(())
    }
}

fn key_token(pair: usize, fact: usize) -> String {
    format!("k{:03}f{}", pair, fact)
}

fn fact_token(doc: usize, fact: usize) -> String {
    format!("v{:03}f{}", doc, fact)
}

fn doc_id(doc: usize) -> String {
    format!("doc-{:04}", doc)
}

/// Deterministically generates a corpus: the same spec (seed included)
/// yields byte-identical files after serialization.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut documents = Vec::with_capacity(spec.num_documents);
    for d in 0..spec.num_documents {
        let pair = d / 2;
        let facts: Vec<String> = (0..spec.facts_per_document)
            .map(|f| format!("{} {}", key_token(pair, f), fact_token(d, f)))
            .collect();
        let text = facts.join(" ; ");
        documents.push(DocumentRecord {
            id: doc_id(d),
            tokens: tokenize(&text),
            text,
        });
    }

    // Document pools instances may ask about. With held-out documents the
    // test pool is the last fifth of the pairs (at least one pair), kept at
    // pair granularity so shared keys never straddle the boundary.
    let pairs = (spec.num_documents + 1) / 2;
    let (train_docs, test_docs): (Vec<usize>, Vec<usize>) = if spec.held_out_docs {
        let test_pairs = (pairs / 5).max(1);
        let cut = (pairs - test_pairs) * 2;
        ((0..cut).collect(), (cut..spec.num_documents).collect())
    } else {
        ((0..spec.num_documents).collect(), (0..spec.num_documents).collect())
    };

    // Instances come in twins: one sampled context is emitted once per
    // member of the asked-about pair. The same words then stand next to
    // both answers in every split, so no amount of context memorization
    // beats an even split between the two facts; only reading the
    // retrieved document does. A lone member (the last document of an odd
    // corpus, or an exhausted count) still yields a single instance.
    let mut gen_split = |name: &str, count: usize, pool: &[usize]| -> Vec<DialogInstance> {
        let mut out = Vec::with_capacity(count);
        let mut pending: Option<(usize, usize, Vec<Turn>)> = None;
        for i in 0..count {
            let (doc, fact, turns) = match pending.take() {
                Some(t) => t,
                None => {
                    let doc = pool[rng.gen_range(0..pool.len())];
                    let fact = rng.gen_range(0..spec.facts_per_document);

                    let mut turns = Vec::new();
                    if rng.gen_bool(spec.distractor_turn_rate) {
                        for (speaker, text) in
                            [(Speaker::S1, "hello there"), (Speaker::S2, "hi")]
                        {
                            turns.push(Turn {
                                speaker,
                                text: text.to_string(),
                                tokens: tokenize(text),
                            });
                        }
                    }
                    let ask = format!("what about {} ?", key_token(doc / 2, fact));
                    turns.push(Turn {
                        speaker: Speaker::S1,
                        tokens: tokenize(&ask),
                        text: ask,
                    });

                    let partner = doc ^ 1;
                    if partner < spec.num_documents && pool.contains(&partner) {
                        pending = Some((partner, fact, turns.clone()));
                    }
                    (doc, fact, turns)
                }
            };

            let response = format!("it is {} .", fact_token(doc, fact));
            out.push(DialogInstance {
                id: format!("{}-{:05}", name, i),
                turns,
                response_tokens: tokenize(&response),
                response_text: response,
                gold_doc_id: Some(doc_id(doc)),
            });
        }
        out
    };

    let train = gen_split("train", spec.train_instances, &train_docs);
    let val = gen_split("val", spec.val_instances, &train_docs);
    let test = gen_split("test", spec.test_instances, &test_docs);

    Ok(Corpus {
        documents,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_documents: 20,
            train_instances: 60,
            val_instances: 15,
            test_instances: 15,
            vocab_size: 100,
            seed: 7,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let spec = small_spec();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        let dump = |c: &Corpus| {
            let mut s = String::new();
            for d in &c.documents {
                s.push_str(&d.id);
                s.push_str(&d.text);
            }
            for i in c.train.iter().chain(&c.val).chain(&c.test) {
                s.push_str(&i.id);
                s.push_str(&i.response_text);
                for t in &i.turns {
                    s.push_str(&t.text);
                }
            }
            s
        };
        assert_eq!(dump(&a), dump(&b));

        let c = generate_synthetic(&SyntheticSpec {
            seed: 8,
            ..spec
        })
        .unwrap();
        assert_ne!(dump(&a), dump(&c));
    }

    #[test]
    fn every_response_fact_appears_in_its_gold_document() {
        let corpus = generate_synthetic(&small_spec()).unwrap();
        for inst in corpus.train.iter().chain(&corpus.val).chain(&corpus.test) {
            let gold = inst.gold_doc_id.as_ref().unwrap();
            let doc = corpus.document(gold).expect("gold document exists");
            // Response shape is "it is <fact> ."; the fact token must come
            // from the gold document's text.
            let fact = &inst.response_tokens[2];
            assert!(
                doc.tokens.contains(fact),
                "fact {} missing from {}",
                fact,
                gold
            );
        }
    }

    #[test]
    fn asked_key_always_identifies_the_gold_pair() {
        let corpus = generate_synthetic(&small_spec()).unwrap();
        for inst in &corpus.train {
            let gold = inst.gold_doc_id.as_ref().unwrap();
            let doc = corpus.document(gold).unwrap();
            let ask = &inst.turns.last().unwrap().tokens;
            let key = &ask[2];
            assert!(doc.tokens.contains(key));
        }
    }

    #[test]
    fn instances_come_in_twins_sharing_the_context() {
        // Even document count: every instance has its twin right after it,
        // word-identical context, other pair member as gold, different fact
        // in the response. An odd split size leaves one lone trailing
        // instance, which chunks_exact skips.
        let corpus = generate_synthetic(&small_spec()).unwrap();
        for split in [&corpus.train, &corpus.val, &corpus.test] {
            for pair in split.chunks_exact(2) {
                let (a, b) = (&pair[0], &pair[1]);
                let texts =
                    |i: &DialogInstance| i.turns.iter().map(|t| t.text.clone()).collect::<Vec<_>>();
                assert_eq!(texts(a), texts(b));
                assert_ne!(a.gold_doc_id, b.gold_doc_id);
                assert_ne!(a.response_text, b.response_text);
                let num = |i: &DialogInstance| {
                    i.gold_doc_id.as_ref().unwrap()[4..].parse::<usize>().unwrap()
                };
                assert_eq!(num(a) / 2, num(b) / 2, "twins stay within one pair");
            }
        }
    }

    #[test]
    fn held_out_docs_makes_test_golds_disjoint() {
        let spec = SyntheticSpec {
            held_out_docs: true,
            ..small_spec()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        let train_golds: HashSet<_> = corpus
            .train
            .iter()
            .chain(&corpus.val)
            .filter_map(|i| i.gold_doc_id.clone())
            .collect();
        let test_golds: HashSet<_> = corpus
            .test
            .iter()
            .filter_map(|i| i.gold_doc_id.clone())
            .collect();
        assert!(!test_golds.is_empty());
        assert!(train_golds.is_disjoint(&test_golds));
    }

    #[test]
    fn undersized_vocab_budget_is_rejected_with_requirement() {
        // 200 documents with 5 facts each need 1000 fact tokens on top of
        // the markers, so a budget of 1009 cannot fit.
        let spec = SyntheticSpec {
            num_documents: 200,
            facts_per_document: 5,
            vocab_size: 1009,
            ..SyntheticSpec::default()
        };
        let err = generate_synthetic(&spec).unwrap_err().to_string();
        assert!(err.contains("1000 fact tokens"), "{}", err);

        let exact = SyntheticSpec {
            vocab_size: spec.required_vocab(),
            ..spec
        };
        assert!(generate_synthetic(&exact).is_ok());
    }

    #[test]
    fn distractor_rate_zero_means_single_turn_contexts() {
        let spec = SyntheticSpec {
            distractor_turn_rate: 0.0,
            ..small_spec()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        assert!(corpus.train.iter().all(|i| i.turns.len() == 1));
    }
}
