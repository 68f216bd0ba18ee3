use crate::tensor::{Binding, ParamStore, Real, Var};
use crate::worldsim::DataError;

/// Action description unit: learned embedding table, mean pooling, and
/// a linear map to model width. The last table row is the null token
/// for empty descriptions.
#[derive(Clone, Debug)]
pub struct AduModel {
    pub vocab_len: usize,
    pub width: usize,
}

impl AduModel {
    pub fn init<T: Real>(params: &mut ParamStore<T>, vocab_len: usize, width: usize, seed: u64) -> Self {
        params.init_normal("adu.embed", vec![vocab_len + 1, width], 0.02, seed);
        params.init_he("adu.proj.w", vec![width, width], width, seed);
        params.init_zeros("adu.proj.b", vec![width]);
        AduModel { vocab_len, width }
    }

    /// Token ids -> [1, C]. Order-insensitive under mean pooling.
    pub fn encode_text<T: Real>(
        &self,
        b: &mut Binding<T>,
        ids: &[usize],
    ) -> Result<Var, DataError> {
        for &id in ids {
            if id >= self.vocab_len {
                return Err(DataError::UnknownTokenId(id));
            }
        }
        let rows: Vec<usize> = if ids.is_empty() { vec![self.vocab_len] } else { ids.to_vec() };
        let table = b.param("adu.embed");
        let picked = b.tape.gather_rows(table, rows);
        let pooled = b.tape.mean_rows(picked);
        let pooled = b.tape.reshape(pooled, vec![1, self.width]);
        let w = b.param("adu.proj.w");
        let bias = b.param("adu.proj.b");
        Ok(b.tape.linear(pooled, w, bias))
    }

    /// Embedding row of one token (diagnostics / similarity checks).
    pub fn embedding_of<T: Real>(&self, params: &ParamStore<T>, id: usize) -> Vec<f64> {
        let table = params.get("adu.embed");
        table.data[id * self.width..(id + 1) * self.width].iter().map(|v| v.to_f64()).collect()
    }
}

/// Cosine similarity between two embedding vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ParamStore<f64>, AduModel) {
        let mut params: ParamStore<f64> = ParamStore::new();
        let adu = AduModel::init(&mut params, 17, 8, 80);
        (params, adu)
    }

    #[test]
    fn empty_description_maps_to_null_token_deterministically() {
        let (params, adu) = setup();
        let mut b = Binding::new(&params);
        let a = adu.encode_text(&mut b, &[]).unwrap();
        let c = adu.encode_text(&mut b, &[]).unwrap();
        assert_eq!(b.tape.data(a).data, b.tape.data(c).data);
        assert_eq!(b.tape.shape(a), &[1, 8]);
    }

    #[test]
    fn token_order_is_irrelevant_under_mean_pooling() {
        let (params, adu) = setup();
        let mut b = Binding::new(&params);
        let a = adu.encode_text(&mut b, &[0, 5, 13]).unwrap();
        let c = adu.encode_text(&mut b, &[13, 0, 5]).unwrap();
        let av = b.tape.data(a).data.clone();
        let cv = b.tape.data(c).data.clone();
        for (x, y) in av.iter().zip(cv.iter()) {
            assert!((x - y).abs() < 1e-12, "mean pooling must ignore order");
        }
    }

    #[test]
    fn out_of_vocabulary_id_is_named_in_the_error() {
        let (params, adu) = setup();
        let mut b = Binding::new(&params);
        match adu.encode_text(&mut b, &[3, 99]) {
            Err(DataError::UnknownTokenId(99)) => {}
            other => panic!("expected UnknownTokenId(99), got {other:?}"),
        }
    }

    #[test]
    fn gradient_reaches_only_used_rows() {
        let (params, adu) = setup();
        let mut b = Binding::new(&params);
        let t = adu.encode_text(&mut b, &[2, 4]).unwrap();
        let loss = b.tape.mean(t);
        b.tape.backward(loss);
        let grads = b.take_grads();
        let ge = &grads["adu.embed"];
        let row_nonzero = |r: usize| ge[r * 8..(r + 1) * 8].iter().any(|&v| v != 0.0);
        assert!(row_nonzero(2) && row_nonzero(4));
        assert!(!row_nonzero(0) && !row_nonzero(17));
    }
}
