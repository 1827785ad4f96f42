//! Iterative radix-2 FFT and the circular convolution built on it.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    fn mul(self, o: Complex) -> Complex {
        Complex { re: self.re * o.re - self.im * o.im, im: self.re * o.im + self.im * o.re }
    }

    fn add(self, o: Complex) -> Complex {
        Complex { re: self.re + o.re, im: self.im + o.im }
    }

    fn sub(self, o: Complex) -> Complex {
        Complex { re: self.re - o.re, im: self.im - o.im }
    }
}

/// In-place transform; `buf.len()` must be a power of two. The inverse
/// includes the `1/n` factor.
pub fn fft_in_place(buf: &mut [Complex], inverse: bool) {
    let n = buf.len();
    assert!(n.is_power_of_two(), "fft length {n} is not a power of two");
    if n == 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let table = twiddle_table(n);
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let mut w = table[k * stride];
                if inverse {
                    w.im = -w.im;
                }
                let u = buf[start + k];
                let v = buf[start + k + half].mul(w);
                buf[start + k] = u.add(v);
                buf[start + k + half] = u.sub(v);
            }
        }
        len <<= 1;
    }
    if inverse {
        let inv = 1.0 / n as f64;
        for c in buf.iter_mut() {
            c.re *= inv;
            c.im *= inv;
        }
    }
}

thread_local! {
    static TWIDDLES: RefCell<HashMap<usize, Rc<Vec<Complex>>>> = RefCell::new(HashMap::new());
}

/// `exp(-2πik/n)` for `k < n/2`, computed from the angle directly (repeated
/// multiplication drifts) and cached per length.
fn twiddle_table(n: usize) -> Rc<Vec<Complex>> {
    TWIDDLES.with(|cache| {
        cache
            .borrow_mut()
            .entry(n)
            .or_insert_with(|| {
                Rc::new(
                    (0..n / 2)
                        .map(|k| {
                            let a = -2.0 * PI * k as f64 / n as f64;
                            Complex { re: a.cos(), im: a.sin() }
                        })
                        .collect(),
                )
            })
            .clone()
    })
}

fn spectrum(values: &[f64], n: usize) -> Vec<Complex> {
    let mut buf = vec![Complex::ZERO; n];
    for (b, &v) in buf.iter_mut().zip(values) {
        b.re = v;
    }
    fft_in_place(&mut buf, false);
    buf
}

/// `(a * b)_k = Σ_j a_j b_{(k-j) mod d}` through the FFT. Power-of-two
/// lengths transform cyclically at length `d`; other lengths compute the
/// linear convolution at the next power of two `≥ 2d-1` and fold it back
/// modulo `d`.
pub fn circular_convolve_fft(a: &[f64], b: &[f64]) -> Vec<f64> {
    let d = a.len();
    debug_assert_eq!(d, b.len());
    let n = if d.is_power_of_two() { d } else { (2 * d - 1).next_power_of_two() };
    let fa = spectrum(a, n);
    let fb = spectrum(b, n);
    let mut prod: Vec<Complex> = fa.iter().zip(&fb).map(|(x, y)| x.mul(*y)).collect();
    fft_in_place(&mut prod, true);
    let mut out = vec![0.0; d];
    for (i, c) in prod.iter().enumerate() {
        out[i % d] += c.re;
    }
    out
}

pub fn circular_convolve_direct(a: &[f64], b: &[f64]) -> Vec<f64> {
    let d = a.len();
    debug_assert_eq!(d, b.len());
    (0..d).map(|k| (0..d).map(|j| a[j] * b[(k + d - j) % d]).sum()).collect()
}
