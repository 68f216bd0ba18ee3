use super::real::Real;

/// Dense row-major tensor value without gradient tracking.
///
/// This is the plain data container shared by every subsystem: frames,
/// latents, flow fields, checkpoints, metric features. Gradient-tracked
/// computation wraps these in tape nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Array<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "array data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Array { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Array { shape, data: vec![T::ZERO; numel] }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        Array { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Array { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Array { shape, data: (0..numel).map(&mut f).collect() }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a rank-0/rank-[1] scalar tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        self.shape = shape;
        self
    }

    /// Index into a `[C,H,W]` array.
    #[inline(always)]
    pub fn chw(&self, c: usize, y: usize, x: usize) -> T {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline(always)]
    pub fn chw_mut(&mut self, c: usize, y: usize, x: usize) -> &mut T {
        let (h, w) = (self.shape[1], self.shape[2]);
        &mut self.data[(c * h + y) * w + x]
    }

    /// Index into a `[R,C]` matrix.
    #[inline(always)]
    pub fn rc(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn to_f64(&self) -> Array<f64> {
        Array { shape: self.shape.clone(), data: self.data.iter().map(|x| x.to_f64()).collect() }
    }

    pub fn to_f32(&self) -> Array<f32> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.to_f64() as f32).collect(),
        }
    }
}

/// Mean squared difference between two equal-shape arrays.
pub fn mse<T: Real>(a: &Array<T>, b: &Array<T>) -> f64 {
    assert_eq!(a.shape, b.shape, "mse shape mismatch {:?} vs {:?}", a.shape, b.shape);
    let n = a.numel() as f64;
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        / n
}

/// Mean absolute difference between two equal-shape arrays.
pub fn mean_abs_diff<T: Real>(a: &Array<T>, b: &Array<T>) -> f64 {
    assert_eq!(a.shape, b.shape, "shape mismatch {:?} vs {:?}", a.shape, b.shape);
    let n = a.numel() as f64;
    a.data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| (x.to_f64() - y.to_f64()).abs())
        .sum::<f64>()
        / n
}
