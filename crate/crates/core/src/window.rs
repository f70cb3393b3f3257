//! Window partitioning, its inverse, cyclic shifts and padding to window
//! multiples. Feature maps are `[D, h, w]`; windows are `[nW, M*M, D]`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub height: usize,
    pub width: usize,
    pub window_side: usize,
}

impl WindowLayout {
    pub fn new(height: usize, width: usize, window_side: usize) -> Result<Self> {
        if window_side == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("window layout sizes must be positive"));
        }
        if height % window_side != 0 || width % window_side != 0 {
            return Err(Error::invalid(format!(
                "{height}x{width} is not divisible into {window_side}x{window_side} windows"
            )));
        }
        Ok(WindowLayout {
            height,
            width,
            window_side,
        })
    }

    pub fn windows_y(&self) -> usize {
        self.height / self.window_side
    }

    pub fn windows_x(&self) -> usize {
        self.width / self.window_side
    }

    pub fn num_windows(&self) -> usize {
        self.windows_y() * self.windows_x()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window_side * self.window_side
    }
}

/// Smallest multiple of `m` that is at least `n`.
pub fn padded_len(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// `[D, h, w]` to `[nW, M*M, D]`, windows and tokens both row-major.
pub fn window_partition<T: Scalar>(tape: &Tape<T>, x: &Var<T>, m: usize) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!(
            "window_partition expects [D, h, w], got {s:?}"
        )));
    }
    let (d, h, w) = (s[0], s[1], s[2]);
    let lay = WindowLayout::new(h, w, m)?;
    let r = tape.reshape(x, [d, lay.windows_y(), m, lay.windows_x(), m])?;
    let p = tape.permute(&r, &[1, 3, 2, 4, 0])?;
    tape.reshape(&p, [lay.num_windows(), m * m, d])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(
    tape: &Tape<T>,
    wins: &Var<T>,
    layout: WindowLayout,
) -> Result<Var<T>> {
    let s = wins.shape();
    let m = layout.window_side;
    if s.len() != 3 || s[0] != layout.num_windows() || s[1] != m * m {
        return Err(Error::invalid(format!(
            "windows of shape {s:?} do not match layout {layout:?}"
        )));
    }
    let d = s[2];
    let r = tape.reshape(wins, [layout.windows_y(), layout.windows_x(), m, m, d])?;
    let p = tape.permute(&r, &[4, 0, 2, 1, 3])?;
    tape.reshape(&p, [d, layout.height, layout.width])
}

/// Channel-last variant of [`window_partition`]: `[h, w, D]` to
/// `[nW, M*M, D]`.
pub fn partition_hwc<T: Scalar>(tape: &Tape<T>, x: &Var<T>, m: usize) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::invalid(format!(
            "partition_hwc expects [h, w, D], got {s:?}"
        )));
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    let lay = WindowLayout::new(h, w, m)?;
    let r = tape.reshape(x, [lay.windows_y(), m, lay.windows_x(), m, d])?;
    let p = tape.permute(&r, &[0, 2, 1, 3, 4])?;
    tape.reshape(&p, [lay.num_windows(), m * m, d])
}

/// Inverse of [`partition_hwc`].
pub fn reverse_hwc<T: Scalar>(
    tape: &Tape<T>,
    wins: &Var<T>,
    layout: WindowLayout,
) -> Result<Var<T>> {
    let s = wins.shape();
    let m = layout.window_side;
    if s.len() != 3 || s[0] != layout.num_windows() || s[1] != m * m {
        return Err(Error::invalid(format!(
            "windows of shape {s:?} do not match layout {layout:?}"
        )));
    }
    let d = s[2];
    let r = tape.reshape(wins, [layout.windows_y(), layout.windows_x(), m, m, d])?;
    let p = tape.permute(&r, &[0, 2, 1, 3, 4])?;
    tape.reshape(&p, [layout.height, layout.width, d])
}

/// Toroidal roll of a `[D, h, w]` map: `out[c, (y+dy) mod h, (x+dx) mod w] = x[c, y, x]`.
pub fn cyclic_shift<T: Scalar>(tape: &Tape<T>, x: &Var<T>, dy: isize, dx: isize) -> Result<Var<T>> {
    if x.shape().len() != 3 {
        return Err(Error::invalid(format!(
            "cyclic_shift expects [D, h, w], got {:?}",
            x.shape()
        )));
    }
    let y = tape.roll(x, 1, dy)?;
    tape.roll(&y, 2, dx)
}

/// Zero-pad a `[D, h, w]` map on the bottom and right up to multiples of `m`.
pub fn pad_to_multiple<T: Scalar>(tape: &Tape<T>, x: &Var<T>, m: usize) -> Result<Var<T>> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let y = tape.pad_end(x, 1, padded_len(h, m) - h)?;
    tape.pad_end(&y, 2, padded_len(w, m) - w)
}

/// Undo [`pad_to_multiple`].
pub fn crop<T: Scalar>(tape: &Tape<T>, x: &Var<T>, h: usize, w: usize) -> Result<Var<T>> {
    let y = if x.shape()[1] == h {
        x.clone()
    } else {
        tape.narrow(x, 1, 0, h)?
    };
    if y.shape()[2] == w {
        Ok(y)
    } else {
        tape.narrow(&y, 2, 0, w)
    }
}

/// Plain-tensor convenience wrappers.
pub fn partition_tensor<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let t = Tape::no_grad();
    Ok(window_partition(&t, &t.constant(x.clone()), m)?
        .value()
        .clone())
}

pub fn reverse_tensor<T: Scalar>(wins: &Tensor<T>, layout: WindowLayout) -> Result<Tensor<T>> {
    let t = Tape::no_grad();
    Ok(window_reverse(&t, &t.constant(wins.clone()), layout)?
        .value()
        .clone())
}

pub fn shift_tensor<T: Scalar>(x: &Tensor<T>, dy: isize, dx: isize) -> Result<Tensor<T>> {
    let t = Tape::no_grad();
    Ok(cyclic_shift(&t, &t.constant(x.clone()), dy, dx)?
        .value()
        .clone())
}
