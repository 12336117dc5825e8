use std::path::Path;
use std::process::Command;

use crate::error::{Error, Result};
use crate::frame::{read_png, write_png, PixelFrame};

/// Pluggable still-image coder for I-frames.
pub trait IntraCodec: Sync {
    fn name(&self) -> &str;
    /// `frame` is at its original (unpadded) size.
    fn encode(&self, frame: &PixelFrame) -> Result<Vec<u8>>;
    fn decode(&self, bytes: &[u8], width: usize, height: usize) -> Result<PixelFrame>;
    /// Bits charged to the rate for an I-frame payload.
    fn reported_bits(&self, bytes: &[u8]) -> u64 {
        8 * bytes.len() as u64
    }
}

/// Stores interleaved 8-bit RGB. Lossless for frames on the 8-bit grid.
#[derive(Clone, Copy, Debug, Default)]
pub struct VerbatimIntra;

impl IntraCodec for VerbatimIntra {
    fn name(&self) -> &str {
        "verbatim"
    }

    fn encode(&self, frame: &PixelFrame) -> Result<Vec<u8>> {
        Ok(frame.to_rgb8())
    }

    fn decode(&self, bytes: &[u8], width: usize, height: usize) -> Result<PixelFrame> {
        if bytes.len() != 3 * width * height {
            return Err(Error::Intra(format!("verbatim payload of {} bytes for {width}x{height}", bytes.len())));
        }
        PixelFrame::from_rgb8(width, height, bytes)
    }
}

/// Shells out to an image codec. Each command is run through `sh -c` with
/// `{in}` and `{out}` replaced by file paths; the encoder reads a PNG and
/// writes the payload, the decoder reads the payload and writes a PNG.
#[derive(Clone, Debug)]
pub struct ExternalIntra {
    pub encode_cmd: String,
    pub decode_cmd: String,
}

impl ExternalIntra {
    fn run(template: &str, input: &Path, output: &Path) -> Result<()> {
        let cmd = template
            .replace("{in}", &input.display().to_string())
            .replace("{out}", &output.display().to_string());
        let status = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .status()
            .map_err(|e| Error::Intra(format!("cannot run `{cmd}`: {e}")))?;
        if !status.success() {
            return Err(Error::Intra(format!("`{cmd}` exited with {status}")));
        }
        Ok(())
    }
}

impl IntraCodec for ExternalIntra {
    fn name(&self) -> &str {
        "external"
    }

    fn encode(&self, frame: &PixelFrame) -> Result<Vec<u8>> {
        let dir = tempfile::tempdir()?;
        let (png, out) = (dir.path().join("frame.png"), dir.path().join("payload.bin"));
        write_png(&png, frame)?;
        Self::run(&self.encode_cmd, &png, &out)?;
        Ok(std::fs::read(out)?)
    }

    fn decode(&self, bytes: &[u8], width: usize, height: usize) -> Result<PixelFrame> {
        let dir = tempfile::tempdir()?;
        let (input, png) = (dir.path().join("payload.bin"), dir.path().join("frame.png"));
        std::fs::write(&input, bytes)?;
        Self::run(&self.decode_cmd, &input, &png)?;
        let frame = read_png(&png)?;
        if frame.width() != width || frame.height() != height {
            return Err(Error::Intra(format!(
                "external decoder produced {}x{}, expected {width}x{height}",
                frame.width(),
                frame.height()
            )));
        }
        Ok(frame)
    }
}
