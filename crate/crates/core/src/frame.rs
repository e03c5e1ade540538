//! Luma frame ingestion: YUV 4:2:0 reading, padding to LCU multiples and
//! extraction of 66x66 input blocks with their two-sample reference border.

use std::io::Read;
use std::path::Path;

use thiserror::Error;

/// Side of the stitched input block: 64 LCU samples plus the two reference
/// rows/columns.
pub const LCU_INPUT_SIDE: usize = 66;
pub const LCU_INPUT_AREA: usize = LCU_INPUT_SIDE * LCU_INPUT_SIDE;

/// Fill value for reference samples outside the frame (mid-gray for 8-bit).
pub const BORDER_FILL: u8 = 128;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame has no pixels")]
    EmptyFrame,
    #[error("file size {size} is not a multiple of the {frame_size}-byte frame size for {width}x{height}")]
    BadDimensions {
        size: u64,
        frame_size: u64,
        width: u32,
        height: u32,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One luma plane. Chroma is read past but ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameBuffer {
    pub width: u32,
    pub height: u32,
    pub luma: Vec<u8>,
}

impl FrameBuffer {
    pub fn new(width: u32, height: u32, luma: Vec<u8>) -> FrameBuffer {
        assert_eq!(luma.len(), width as usize * height as usize);
        FrameBuffer { width, height, luma }
    }

    #[inline]
    pub fn sample(&self, x: u32, y: u32) -> u8 {
        self.luma[y as usize * self.width as usize + x as usize]
    }

    /// Sample with edge replication beyond the right/bottom borders.
    #[inline]
    fn sample_clamped(&self, x: i64, y: i64) -> u8 {
        let cx = x.min(self.width as i64 - 1) as u32;
        let cy = y.min(self.height as i64 - 1) as u32;
        self.sample(cx, cy)
    }
}

/// One 66x66 input block: the top two rows and left two columns hold
/// reference samples, the remaining 64x64 holds the LCU, plus the QP the
/// block is to be coded at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LcuInput {
    pub pixels: [u8; LCU_INPUT_AREA],
    pub qp: u8,
}

impl LcuInput {
    /// Uniform block at `value` with a `BORDER_FILL` reference border.
    pub fn flat(value: u8, qp: u8) -> LcuInput {
        let mut pixels = [BORDER_FILL; LCU_INPUT_AREA];
        for r in 2..LCU_INPUT_SIDE {
            for c in 2..LCU_INPUT_SIDE {
                pixels[r * LCU_INPUT_SIDE + c] = value;
            }
        }
        LcuInput { pixels, qp }
    }

    /// Sample in 66x66 coordinates (row, col).
    #[inline]
    pub fn sample(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * LCU_INPUT_SIDE + col]
    }

    #[inline]
    pub fn set_sample(&mut self, row: usize, col: usize, v: u8) {
        self.pixels[row * LCU_INPUT_SIDE + col] = v;
    }

    /// LCU sample at (x, y) in 64x64 coordinates.
    #[inline]
    pub fn lcu_pixel(&self, x: usize, y: usize) -> u8 {
        self.sample(y + 2, x + 2)
    }
}

/// Reads every frame of a planar YUV 4:2:0 file, keeping only luma.
pub fn read_yuv420(path: &Path, width: u32, height: u32) -> Result<Vec<FrameBuffer>, FrameError> {
    if width == 0 || height == 0 {
        return Err(FrameError::EmptyFrame);
    }
    let luma_size = width as u64 * height as u64;
    let frame_size = luma_size + luma_size / 2;
    let meta = std::fs::metadata(path)?;
    if meta.len() == 0 || meta.len() % frame_size != 0 {
        return Err(FrameError::BadDimensions {
            size: meta.len(),
            frame_size,
            width,
            height,
        });
    }
    let mut file = std::fs::File::open(path)?;
    let frames = (meta.len() / frame_size) as usize;
    let mut out = Vec::with_capacity(frames);
    let mut chroma = vec![0u8; (luma_size / 2) as usize];
    for _ in 0..frames {
        let mut luma = vec![0u8; luma_size as usize];
        file.read_exact(&mut luma)?;
        file.read_exact(&mut chroma)?;
        out.push(FrameBuffer::new(width, height, luma));
    }
    Ok(out)
}

/// Number of LCU columns and rows after padding to `lcu_size` multiples.
pub fn lcu_grid(frame: &FrameBuffer, lcu_size: u32) -> (u32, u32) {
    let cols = frame.width.div_ceil(lcu_size);
    let rows = frame.height.div_ceil(lcu_size);
    (cols, rows)
}

/// Extracts one `LcuInput` per LCU in raster order. The frame is padded to
/// LCU multiples by edge replication; reference samples come from the
/// neighboring original pixels, or `BORDER_FILL` above/left of the frame.
pub fn extract_lcus(frame: &FrameBuffer, lcu_size: u32, qp: u8) -> Result<Vec<LcuInput>, FrameError> {
    if frame.width == 0 || frame.height == 0 || frame.luma.is_empty() {
        return Err(FrameError::EmptyFrame);
    }
    assert_eq!(lcu_size, 64, "66x66 extraction is defined for 64x64 LCUs");
    let (cols, rows) = lcu_grid(frame, lcu_size);
    let mut out = Vec::with_capacity((cols * rows) as usize);
    for ly in 0..rows {
        for lx in 0..cols {
            let mut input = LcuInput {
                pixels: [0u8; LCU_INPUT_AREA],
                qp,
            };
            for r in 0..LCU_INPUT_SIDE {
                for c in 0..LCU_INPUT_SIDE {
                    let fy = ly as i64 * lcu_size as i64 + r as i64 - 2;
                    let fx = lx as i64 * lcu_size as i64 + c as i64 - 2;
                    let v = if fy < 0 || fx < 0 {
                        BORDER_FILL
                    } else {
                        frame.sample_clamped(fx, fy)
                    };
                    input.set_sample(r, c, v);
                }
            }
            out.push(input);
        }
    }
    Ok(out)
}
