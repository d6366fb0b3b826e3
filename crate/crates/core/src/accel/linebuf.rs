//! Raster-order line buffer producing K×K sliding windows.

use std::collections::VecDeque;

use super::LANES;
use crate::graph::{same_out, same_pad_before};
use crate::quant::QTensor;

/// Holds the last K rows of a raster stream (K−1 complete rows plus the one
/// being written) and emits every same-padded window as soon as its bottom
/// row arrives. Windows are laid out `[ky][kx][lane]`.
#[derive(Debug, Clone)]
pub struct LineBuffer {
    k: usize,
    stride: usize,
    width: usize,
    lanes: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
    rows: VecDeque<Vec<i32>>,
    /// Rows pushed so far, counting top padding.
    pushed: usize,
    emitted_rows: usize,
    window: Vec<i32>,
}

impl LineBuffer {
    pub fn new(height: usize, width: usize, lanes: usize, k: usize, stride: usize) -> Self {
        let mut lb = Self {
            k,
            stride,
            width,
            lanes,
            pad_top: same_pad_before(height, stride, k),
            pad_left: same_pad_before(width, stride, k),
            out_h: same_out(height, stride),
            out_w: same_out(width, stride),
            rows: VecDeque::with_capacity(k),
            pushed: 0,
            emitted_rows: 0,
            window: vec![0; k * k * lanes],
        };
        for _ in 0..lb.pad_top {
            lb.push_raw(vec![0; width * lanes], &mut |_, _, _| {});
        }
        lb
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    /// Feeds one input row of `width * lanes` values; `emit(oy, ox, window)`
    /// is called for every window completed by it.
    pub fn push_row(&mut self, row: &[i32], emit: &mut impl FnMut(usize, usize, &[i32])) {
        assert_eq!(row.len(), self.width * self.lanes, "row length");
        self.push_raw(row.to_vec(), emit);
    }

    /// Flushes bottom padding until every output row has been emitted.
    pub fn finish(&mut self, emit: &mut impl FnMut(usize, usize, &[i32])) {
        while self.emitted_rows < self.out_h {
            self.push_raw(vec![0; self.width * self.lanes], emit);
        }
    }

    fn push_raw(&mut self, row: Vec<i32>, emit: &mut impl FnMut(usize, usize, &[i32])) {
        if self.rows.len() == self.k {
            self.rows.pop_front();
        }
        self.rows.push_back(row);
        self.pushed += 1;
        if self.pushed < self.k {
            return;
        }
        let top = self.pushed - self.k;
        if !top.is_multiple_of(self.stride) || top / self.stride >= self.out_h {
            return;
        }
        let oy = top / self.stride;
        let (k, lanes) = (self.k, self.lanes);
        for ox in 0..self.out_w {
            for ky in 0..k {
                let src = &self.rows[ky];
                for kx in 0..k {
                    let dst = &mut self.window[(ky * k + kx) * lanes..][..lanes];
                    let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                    if ix < 0 || ix >= self.width as isize {
                        dst.fill(0);
                    } else {
                        dst.copy_from_slice(&src[ix as usize * lanes..][..lanes]);
                    }
                }
            }
            emit(oy, ox, &self.window);
        }
        self.emitted_rows += 1;
    }
}

/// Streams every window of channels `[c0, c0 + lanes)` of `fmap`, padding
/// channels past the end with zeros.
pub fn stream_group(
    fmap: &QTensor,
    c0: usize,
    lanes: usize,
    k: usize,
    stride: usize,
    emit: &mut impl FnMut(usize, usize, &[i32]),
) {
    let d = fmap.dims();
    let mut lb = LineBuffer::new(d.height, d.width, lanes, k, stride);
    let mut row = vec![0i32; d.width * lanes];
    let live = lanes.min(d.channels.saturating_sub(c0));
    for y in 0..d.height {
        for x in 0..d.width {
            let base = d.index(y, x, c0);
            row[x * lanes..x * lanes + live].copy_from_slice(&fmap.data()[base..base + live]);
        }
        lb.push_row(&row, emit);
    }
    lb.finish(emit);
}

/// One window of one 32-channel group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPatch {
    pub y: usize,
    pub x: usize,
    pub group: usize,
    /// `K*K*32` values laid out `[ky][kx][lane]`.
    pub taps: Vec<i32>,
}

impl GroupPatch {
    /// Taps of one lane in `[ky][kx]` order.
    pub fn lane(&self, lane: usize) -> Vec<i32> {
        self.taps.iter().skip(lane).step_by(LANES).copied().collect()
    }
}

/// All stride-1 windows of `fmap`, group by group in raster order.
pub fn stream_patches(fmap: &QTensor, k: usize) -> Vec<GroupPatch> {
    let groups = fmap.dims().channels.div_ceil(LANES);
    let mut out = Vec::with_capacity(fmap.dims().pixels() * groups);
    for group in 0..groups {
        stream_group(fmap, group * LANES, LANES, k, 1, &mut |y, x, w| {
            out.push(GroupPatch { y, x, group, taps: w.to_vec() })
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{BitWidth, QuantSpec};
    use crate::tensor::Dims;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn ascending(h: usize, w: usize, c: usize) -> QTensor {
        let spec = QuantSpec::new(BitWidth::W16, 0).unwrap();
        QTensor::new(Dims::new(h, w, c), spec, (0..(h * w * c) as i32).collect()).unwrap()
    }

    /// im2col with zero padding, straight from the definition.
    fn im2col(q: &QTensor, y: usize, x: usize, c: usize, k: usize, stride: usize) -> Vec<i32> {
        let d = q.dims();
        let py = same_pad_before(d.height, stride, k) as isize;
        let px = same_pad_before(d.width, stride, k) as isize;
        let mut v = Vec::new();
        for ky in 0..k {
            for kx in 0..k {
                let iy = (y * stride + ky) as isize - py;
                let ix = (x * stride + kx) as isize - px;
                let inside = iy >= 0 && ix >= 0 && (iy as usize) < d.height && (ix as usize) < d.width;
                v.push(if inside && c < d.channels { q.get(iy as usize, ix as usize, c) } else { 0 });
            }
        }
        v
    }

    #[test]
    fn four_by_four_example() {
        let q = ascending(4, 4, 1);
        let patches = stream_patches(&q, 3);
        assert_eq!(patches.len(), 16);
        assert_eq!((patches[0].y, patches[0].x), (0, 0));
        assert_eq!(patches[0].lane(0), vec![0, 0, 0, 0, 0, 1, 0, 4, 5]);
        assert!(patches[0].lane(1).iter().all(|&v| v == 0));
        assert_eq!(patches[15].lane(0), vec![10, 11, 0, 14, 15, 0, 0, 0, 0]);
    }

    #[test]
    fn zero_input_gives_zero_patches() {
        let spec = QuantSpec::new(BitWidth::W8, 0).unwrap();
        let q = QTensor::zeros(Dims::new(5, 3, 40), spec);
        let p = stream_patches(&q, 3);
        assert_eq!(p.len(), 5 * 3 * 2);
        assert!(p.iter().all(|p| p.taps.iter().all(|&v| v == 0)));
    }

    proptest! {
        #[test]
        fn windows_match_im2col(h in 1usize..9, w in 1usize..9, c in 1usize..5, k in proptest::sample::select(vec![1usize, 3, 5]), stride in 1usize..4) {
            let q = ascending(h, w, c);
            let mut seen = Vec::new();
            stream_group(&q, 0, c, k, stride, &mut |y, x, win| seen.push((y, x, win.to_vec())));
            prop_assert_eq!(seen.len(), same_out(h, stride) * same_out(w, stride));
            for (i, (y, x, win)) in seen.iter().enumerate() {
                prop_assert_eq!((*y, *x), (i / same_out(w, stride), i % same_out(w, stride)));
                for ch in 0..c {
                    let lane: Vec<i32> = win.iter().skip(ch).step_by(c).copied().collect();
                    prop_assert_eq!(lane, im2col(&q, *y, *x, ch, k, stride));
                }
            }
        }
    }
}
