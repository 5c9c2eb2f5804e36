//! Matrix products behind the convolution kernels.

/// Arithmetic used for the matrix products inside convolutions.
///
/// `Single` rounds operands to `f32` and runs the single-precision kernel,
/// which is roughly twice as fast. `Double` keeps everything in `f64` and is
/// what finite-difference gradient checks need.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    Single,
    Double,
}

/// Element types the convolution kernels run in.
pub(crate) trait Element: Copy + Default + 'static {
    fn of(v: f64) -> Self;
    fn get(self) -> f64;

    /// `c = a · b`, overwriting `c`. Strides are in elements.
    ///
    /// # Safety
    /// Every addressed element must be inside the given buffers.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        c: *mut Self,
    );

    fn with_pool<R>(f: impl FnOnce(&mut Vec<Vec<Self>>) -> R) -> R;

    /// A zero-filled buffer, recycled from earlier [`Element::give`] calls so
    /// that large scratch matrices do not fault in fresh pages every time.
    fn take(len: usize) -> Vec<Self> {
        let mut v = Self::with_pool(|pool| pool.pop()).unwrap_or_default();
        v.clear();
        v.resize(len, Self::default());
        v
    }

    fn give(v: Vec<Self>) {
        Self::with_pool(|pool| {
            if pool.len() < SCRATCH_BUFFERS {
                pool.push(v);
            }
        });
    }
}

const SCRATCH_BUFFERS: usize = 4;

thread_local! {
    static POOL_F32: std::cell::RefCell<Vec<Vec<f32>>> = const { std::cell::RefCell::new(Vec::new()) };
    static POOL_F64: std::cell::RefCell<Vec<Vec<f64>>> = const { std::cell::RefCell::new(Vec::new()) };
}

impl Element for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn get(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        c: *mut f32,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, n as isize, 1);
    }

    fn with_pool<R>(f: impl FnOnce(&mut Vec<Vec<f32>>) -> R) -> R {
        POOL_F32.with(|p| f(&mut p.borrow_mut()))
    }
}

impl Element for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn get(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        c: *mut f64,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, n as isize, 1);
    }

    fn with_pool<R>(f: impl FnOnce(&mut Vec<Vec<f64>>) -> R) -> R {
        POOL_F64.with(|p| f(&mut p.borrow_mut()))
    }
}

/// Strided view of a row-major matrix operand.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T = f64> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// The same storage read as its transpose.
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = a · b` in the element type of the operands; `c` is contiguous.
pub(crate) fn gemm<T: Element>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.fill(T::default());
        return;
    }
    check_bounds(a);
    check_bounds(b);
    // SAFETY: `check_bounds` confirmed that the strided views stay inside
    // their slices, and `c` holds exactly `m × n` elements.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            c.as_mut_ptr(),
        )
    }
}

/// `c = beta * c + a · b` where `c` is a contiguous `a.rows × b.cols` matrix.
pub fn matmul(precision: Precision, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    fn run<T: Element>(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
        let convert = |m: MatRef<'_>| -> Vec<T> { m.data.iter().map(|&v| T::of(v)).collect() };
        let (ad, bd) = (convert(a), convert(b));
        let at = MatRef { data: &ad[..], rows: a.rows, cols: a.cols, row_stride: a.row_stride, col_stride: a.col_stride };
        let bt = MatRef { data: &bd[..], rows: b.rows, cols: b.cols, row_stride: b.row_stride, col_stride: b.col_stride };
        let mut out = vec![T::default(); c.len()];
        gemm(at, bt, &mut out);
        for (dst, src) in c.iter_mut().zip(out) {
            *dst = if beta == 0.0 { src.get() } else { beta * *dst + src.get() };
        }
    }
    match precision {
        Precision::Single => run::<f32>(a, b, beta, c),
        Precision::Double => run::<f64>(a, b, beta, c),
    }
}

fn check_bounds<T>(m: MatRef<'_, T>) {
    if m.rows == 0 || m.cols == 0 {
        return;
    }
    let last = (m.rows - 1) * m.row_stride + (m.cols - 1) * m.col_stride;
    assert!(last < m.data.len(), "strided matrix view out of bounds");
}
