use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{bilstm, xavier_uniform, Adam, AdamConfig, BiLstmParams, ParamId, ParamStore, Tape, Tensor, Var};
use crate::text::{EmbeddingTable, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// One-direction Bi-LSTM size.
    pub lstm_hidden: usize,
    /// MLP hidden size; also the representation width.
    pub repr_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            lstm_hidden: 32,
            repr_size: 64,
            epochs: 20,
            batch_size: 10,
            adam: AdamConfig {
                learning_rate: 1e-2,
                decay: 1.0,
                ..AdamConfig::default()
            },
            seed: 7,
        }
    }
}

/// Bi-LSTM (final states of both directions) followed by a one-hidden-layer
/// MLP. The hidden activation is the question representation.
#[derive(Clone, Debug)]
pub struct ReprClassifier {
    config: ClassifierConfig,
    store: ParamStore,
    encoder: BiLstmParams,
    hidden_w: ParamId,
    hidden_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    table: EmbeddingTable,
    num_classes: usize,
}

impl ReprClassifier {
    fn new(config: ClassifierConfig, table: EmbeddingTable, num_classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = table.dim();
        let encoder = BiLstmParams::new(&mut store, "cls.bilstm", d, config.lstm_hidden, &mut rng);
        let width = 2 * config.lstm_hidden;
        let hidden_w = store.add("cls.hidden.w", xavier_uniform(&mut rng, width, config.repr_size));
        let hidden_b = store.add("cls.hidden.b", Tensor::zeros(&[config.repr_size]));
        let out_w = store.add("cls.out.w", xavier_uniform(&mut rng, config.repr_size, num_classes));
        let out_b = store.add("cls.out.b", Tensor::zeros(&[num_classes]));
        ReprClassifier {
            config,
            store,
            encoder,
            hidden_w,
            hidden_b,
            out_w,
            out_b,
            table,
            num_classes,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn repr_size(&self) -> usize {
        self.config.repr_size
    }

    fn forward<'t>(&self, tape: &'t Tape, seq: &TokenSequence) -> Result<(Var<'t>, Var<'t>)> {
        let p = |id| tape.param(&self.store, id);
        let x = tape.constant(self.table.lookup(seq)?);
        let n = seq.len();
        let states = bilstm(tape, &self.store, &self.encoder, x)?;
        let u = self.config.lstm_hidden;
        let last_fwd = states.slice_rows(n - 1, n)?.slice_cols(0, u)?;
        let last_bwd = states.slice_rows(0, 1)?.slice_cols(u, 2 * u)?;
        let summary = tape.concat_cols(&[last_fwd, last_bwd])?;
        let hidden = summary.matmul(p(self.hidden_w))?.add_row_bias(p(self.hidden_b))?.tanh();
        let logits = hidden.matmul(p(self.out_w))?.add_row_bias(p(self.out_b))?;
        Ok((hidden, logits))
    }

    /// Hidden-layer activation for `seq`.
    pub fn represent(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let (hidden, _) = self.forward(&tape, seq)?;
        let out = hidden.value().data().to_vec();
        Ok(out)
    }

    pub fn predict(&self, seq: &TokenSequence) -> Result<usize> {
        let tape = Tape::new();
        let (_, logits) = self.forward(&tape, seq)?;
        let v = logits.value();
        Ok(argmax(v.data()))
    }

    pub fn accuracy(&self, inputs: &[TokenSequence], labels: &[usize]) -> Result<f64> {
        let mut correct = 0;
        for (seq, &label) in inputs.iter().zip(labels) {
            correct += usize::from(self.predict(seq)? == label);
        }
        Ok(correct as f64 / inputs.len().max(1) as f64)
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Trains the classifier with cross-entropy over class labels.
pub fn train_repr_classifier(
    inputs: &[TokenSequence],
    labels: &[usize],
    table: &EmbeddingTable,
    config: ClassifierConfig,
) -> Result<ReprClassifier> {
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::Invalid(format!(
            "{} inputs with {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if let Some(i) = inputs.iter().position(TokenSequence::is_empty) {
        return Err(Error::EmptySequence(format!("classifier input {i}")));
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let distinct = {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if distinct < 2 {
        return Err(Error::Invalid("classifier needs at least two classes".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }

    let mut model = ReprClassifier::new(config.clone(), table.clone(), num_classes);
    let mut adam = Adam::new(config.adam.clone(), &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..config.epochs {
        adam.set_epoch(epoch as u32);
        order.shuffle(&mut rng);
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            model.store.zero_grads();
            let mut total = 0.0;
            for &i in batch {
                let tape = Tape::new();
                let (_, logits) = model.forward(&tape, &inputs[i])?;
                let loss = logits.cross_entropy(labels[i])?;
                total += loss.item();
                let grads = tape.backward(loss)?;
                grads.accumulate_into(&mut model.store, 1.0 / batch.len() as f64);
            }
            if !total.is_finite() {
                return Err(Error::Divergence { epoch, batch: batch_no });
            }
            adam.step(&mut model.store)?;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{random_embeddings, tokenize, Vocabulary};

    fn data() -> (Vec<TokenSequence>, Vec<usize>, EmbeddingTable) {
        let vocab = Vocabulary::from_tokens(["red", "blue", "n1", "n2", "n3", "n4"]).unwrap();
        let table = random_embeddings(&vocab, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = ["n1", "n2", "n3", "n4"];
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let label = i % 2;
            let mut words: Vec<&str> = (0..4).map(|_| *noise.choose(&mut rng).unwrap()).collect();
            let pos = i % 5;
            words.insert(pos, if label == 0 { "red" } else { "blue" });
            inputs.push(tokenize(&words.join(" "), &vocab).unwrap());
            labels.push(label);
        }
        (inputs, labels, table)
    }

    #[test]
    fn separable_patterns_are_learned() {
        let (inputs, labels, table) = data();
        let model = train_repr_classifier(&inputs, &labels, &table, ClassifierConfig::default()).unwrap();
        let acc = model.accuracy(&inputs, &labels).unwrap();
        assert!(acc >= 0.95, "train accuracy {acc}");
    }

    #[test]
    fn representation_shape_and_determinism() {
        let (inputs, labels, table) = data();
        let config = ClassifierConfig {
            epochs: 1,
            repr_size: 12,
            ..ClassifierConfig::default()
        };
        let model = train_repr_classifier(&inputs[..20], &labels[..20], &table, config).unwrap();
        let a = model.represent(&inputs[0]).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, model.represent(&inputs[0]).unwrap());
    }

    #[test]
    fn single_class_is_rejected() {
        let (inputs, _, table) = data();
        let labels = vec![0; inputs.len()];
        assert!(train_repr_classifier(&inputs, &labels, &table, ClassifierConfig::default()).is_err());
    }
}
