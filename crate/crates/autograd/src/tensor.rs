use std::fmt;

/// Shape of a rank-3 tensor: a batch of `rows x cols` row-major matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const fn new(batch: usize, rows: usize, cols: usize) -> Self {
        Self { batch, rows, cols }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.rows * self.cols
    }

    /// Elementwise broadcast of two shapes; each dimension must match or be 1.
    pub fn broadcast(&self, other: &Shape) -> Option<Shape> {
        fn dim(a: usize, b: usize) -> Option<usize> {
            if a == b || b == 1 {
                Some(a)
            } else if a == 1 {
                Some(b)
            } else {
                None
            }
        }
        Some(Shape::new(
            dim(self.batch, other.batch)?,
            dim(self.rows, other.rows)?,
            dim(self.cols, other.cols)?,
        ))
    }

    /// Strides used when this shape is read under broadcasting (0 on size-1 axes).
    pub(crate) fn broadcast_strides(&self) -> (usize, usize, usize) {
        let sb = if self.batch == 1 {
            0
        } else {
            self.rows * self.cols
        };
        let sr = if self.rows == 1 { 0 } else { self.cols };
        let sc = if self.cols == 1 { 0 } else { 1 };
        (sb, sr, sc)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}]", self.batch, self.rows, self.cols)
    }
}

/// Dense row-major `[batch, rows, cols]` tensor of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.numel(),
            data.len(),
            "tensor data length {} does not match shape {}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    /// A single matrix (`batch == 1`).
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::from_vec(Shape::new(1, rows, cols), data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, b: usize, r: usize, c: usize) -> usize {
        debug_assert!(b < self.shape.batch && r < self.shape.rows && c < self.shape.cols);
        (b * self.shape.rows + r) * self.shape.cols + c
    }

    #[inline]
    pub fn get(&self, b: usize, r: usize, c: usize) -> f64 {
        self.data[self.index(b, r, c)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, r: usize, c: usize, value: f64) {
        let i = self.index(b, r, c);
        self.data[i] = value;
    }

    /// Row `r` of batch item `b`.
    pub fn row(&self, b: usize, r: usize) -> &[f64] {
        let start = self.index(b, r, 0);
        &self.data[start..start + self.shape.cols]
    }

    /// The `rows x cols` matrix of batch item `b`.
    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.shape.rows * self.shape.cols;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data viewed under a different shape with equal element count.
    pub fn reshape(mut self, shape: Shape) -> Self {
        assert_eq!(
            shape.numel(),
            self.data.len(),
            "reshape to {shape} changes size"
        );
        self.shape = shape;
        self
    }
}
