use ndarray::{Array2, ArrayView1};

use super::{Batch, Model};
use crate::corpus::{FactCorpus, FactId, FactRecord};
use crate::error::{Error, Result};

const EVAL_CHUNK: usize = 64;

/// A fact as token ids, ready for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedFact {
    pub id: FactId,
    pub tokens: Vec<u32>,
    pub object_len: usize,
}

impl EncodedFact {
    pub fn encode(corpus: &FactCorpus, record: &FactRecord) -> Result<Self> {
        Ok(Self {
            id: record.id(),
            tokens: corpus.tokenize(&record.surface)?,
            object_len: record.object_len(),
        })
    }

    pub fn encode_all(corpus: &FactCorpus, records: &[FactRecord]) -> Result<Vec<Self>> {
        records.iter().map(|r| Self::encode(corpus, r)).collect()
    }

    /// Each paraphrase of `record` as its own encoded fact (same id).
    pub fn encode_paraphrases(corpus: &FactCorpus, record: &FactRecord) -> Result<Vec<Self>> {
        record
            .paraphrases
            .iter()
            .map(|p| {
                Ok(Self {
                    id: record.id(),
                    tokens: corpus.tokenize(p)?,
                    object_len: record.object_len(),
                })
            })
            .collect()
    }

    /// Positions (in `tokens`) of the object tokens.
    pub fn object_positions(&self) -> std::ops::Range<usize> {
        let end = self.tokens.len() - 1;
        end - self.object_len..end
    }
}

/// Anything that maps token sequences to next-token logits.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    /// One `len x vocab` logits matrix per sequence; row `i` scores token `i + 1`.
    fn sequence_logits(&self, seqs: &[Vec<u32>]) -> Result<Vec<Array2<f32>>>;
}

impl LanguageModel for Model<f32> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn sequence_logits(&self, seqs: &[Vec<u32>]) -> Result<Vec<Array2<f32>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(EVAL_CHUNK) {
            let batch = Batch::from_sequences(chunk);
            let (logits, _) = self.forward(&batch)?;
            let t = batch.seq_len();
            for (b, s) in chunk.iter().enumerate() {
                out.push(
                    logits
                        .slice(ndarray::s![b * t..b * t + s.len(), ..])
                        .to_owned(),
                );
            }
        }
        Ok(out)
    }
}

/// Index of the first maximal entry.
pub fn argmax<F: PartialOrd + Copy>(row: ArrayView1<F>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_row(row: ArrayView1<f32>) -> Vec<f32> {
    let max = row.fold(f32::NEG_INFINITY, |a, &v| a.max(v));
    let exps: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Greedy decoding from the prompt reproduces every object token.
///
/// Greedy decoding matches the object iff the argmax at every object position
/// under teacher forcing matches, so one forward pass over the surface decides.
fn recalled_from_logits(fact: &EncodedFact, logits: &Array2<f32>) -> bool {
    fact.object_positions()
        .all(|p| argmax(logits.row(p - 1)) == fact.tokens[p] as usize)
}

pub fn recall_fact<M: LanguageModel + ?Sized>(model: &M, fact: &EncodedFact) -> Result<bool> {
    let logits = model.sequence_logits(std::slice::from_ref(&fact.tokens))?;
    Ok(recalled_from_logits(fact, &logits[0]))
}

/// Per-fact recall flags.
pub fn recall_all<M: LanguageModel + ?Sized>(
    model: &M,
    facts: &[EncodedFact],
) -> Result<Vec<bool>> {
    let seqs: Vec<Vec<u32>> = facts.iter().map(|f| f.tokens.clone()).collect();
    let logits = model.sequence_logits(&seqs)?;
    Ok(facts
        .iter()
        .zip(&logits)
        .map(|(f, l)| recalled_from_logits(f, l))
        .collect())
}

/// Fraction of facts recalled.
pub fn accuracy<M: LanguageModel + ?Sized>(model: &M, facts: &[EncodedFact]) -> Result<f64> {
    if facts.is_empty() {
        return Err(Error::Empty("accuracy over no facts"));
    }
    let hits = recall_all(model, facts)?.into_iter().filter(|&r| r).count();
    Ok(hits as f64 / facts.len() as f64)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Always predicts `emit` as the next token, regardless of context.
    pub(crate) struct Parrot {
        pub vocab: usize,
        pub emit: Vec<u32>,
    }

    impl LanguageModel for Parrot {
        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn sequence_logits(&self, seqs: &[Vec<u32>]) -> Result<Vec<Array2<f32>>> {
            Ok(seqs
                .iter()
                .map(|s| {
                    let mut l = Array2::zeros((s.len(), self.vocab));
                    for i in 0..s.len() {
                        // emit[k] is predicted for the token k + 1 places before EOS.
                        let from_end = s.len() - 1 - i;
                        let tok = from_end
                            .checked_sub(2)
                            .and_then(|k| self.emit.get(k))
                            .copied()
                            .unwrap_or(0);
                        l[[i, tok as usize]] = 10.0;
                    }
                    l
                })
                .collect())
        }
    }

    fn fact(tokens: Vec<u32>, object_len: usize) -> EncodedFact {
        EncodedFact {
            id: 0,
            tokens,
            object_len,
        }
    }

    #[test]
    fn recall_matches_emitted_object() {
        // BOS france capital paris EOS with paris = 5, rome = 6.
        let parrot = Parrot {
            vocab: 8,
            emit: vec![5],
        };
        assert!(recall_fact(&parrot, &fact(vec![1, 3, 4, 5, 2], 1)).unwrap());
        assert!(!recall_fact(&parrot, &fact(vec![1, 3, 4, 6, 2], 1)).unwrap());
    }

    #[test]
    fn multi_token_object_needs_every_token() {
        // Parrot emits 7 then 5 for the two object slots.
        let parrot = Parrot {
            vocab: 8,
            emit: vec![5, 7],
        };
        assert!(recall_fact(&parrot, &fact(vec![1, 3, 7, 5, 2], 2)).unwrap());
        assert!(!recall_fact(&parrot, &fact(vec![1, 3, 7, 6, 2], 2)).unwrap());
    }

    #[test]
    fn accuracy_fractions() {
        let parrot = Parrot {
            vocab: 8,
            emit: vec![5],
        };
        let hit = fact(vec![1, 3, 5, 2], 1);
        let miss = fact(vec![1, 3, 6, 2], 1);
        assert_eq!(accuracy(&parrot, &[hit.clone(), hit.clone()]).unwrap(), 1.0);
        assert_eq!(accuracy(&parrot, std::slice::from_ref(&miss)).unwrap(), 0.0);
        assert_eq!(
            accuracy(&parrot, &[hit.clone(), hit.clone(), hit, miss]).unwrap(),
            0.75
        );
        assert!(accuracy(&parrot, &[]).is_err());
    }
}
