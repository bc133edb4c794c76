use rand::Rng;

/// A named learnable (or persistent, non-trainable) array with its gradient
/// and Adam moment accumulators.
///
/// Batch-norm running statistics are stored as non-trainable parameters so
/// that checkpoints capture them without a separate buffer mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub(crate) adam_m: Vec<f32>,
    pub(crate) adam_v: Vec<f32>,
    pub(crate) step_count: u64,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "parameter value length does not match shape");
        Parameter {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
            trainable: true,
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, fill: f32) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![fill; n])
    }

    /// He-uniform initialisation: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn he_uniform<R: Rng + ?Sized>(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        Self::new(name, shape, value)
    }

    pub fn non_trainable(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.grad.len(), "gradient length mismatch for {}", self.name);
        for (a, b) in self.grad.iter_mut().zip(g) {
            *a += b;
        }
    }
}
