//! Adapter for pretrained backbones hosted outside this process.
//!
//! The command is invoked once per batch as
//! `<command...> --input <dir> --output <file>`. `<dir>` holds the batch as
//! `000000.png`, `000001.png`, ... already resized to `input_size_px`; the
//! command must write a JSON array with one embedding array per image, in
//! file-name order. `scripts/backbone_embed.py` implements this protocol
//! for Hugging Face vision backbones.

use std::process::Command;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::EncoderError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEncoder {
    pub encoder_id: String,
    pub dim: usize,
    pub input_size_px: u32,
    pub command: Vec<String>,
}

impl ExternalEncoder {
    pub fn embed_batch(&self, images: &[RgbImage]) -> Result<Vec<Vec<f32>>, EncoderError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| EncoderError::External("empty command".into()))?;
        let dir = tempfile::tempdir()?;
        for (i, img) in images.iter().enumerate() {
            let resized = image::imageops::resize(
                img,
                self.input_size_px,
                self.input_size_px,
                image::imageops::FilterType::Triangle,
            );
            resized
                .save(dir.path().join(format!("{i:06}.png")))
                .map_err(|e| EncoderError::External(e.to_string()))?;
        }
        let out_path = dir.path().join("embeddings.json");
        let output = Command::new(program)
            .args(args)
            .arg("--input")
            .arg(dir.path())
            .arg("--output")
            .arg(&out_path)
            .output()
            .map_err(|e| EncoderError::External(format!("cannot run {program}: {e}")))?;
        if !output.status.success() {
            return Err(EncoderError::External(format!(
                "{program} exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let text = std::fs::read_to_string(&out_path)?;
        let vectors: Vec<Vec<f32>> =
            serde_json::from_str(&text).map_err(|e| EncoderError::External(e.to_string()))?;
        if vectors.len() != images.len() {
            return Err(EncoderError::External(format!(
                "expected {} embeddings, got {}",
                images.len(),
                vectors.len()
            )));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != self.dim) {
            return Err(EncoderError::DimensionMismatch(v.len(), self.dim));
        }
        Ok(vectors)
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use image::Rgb;
    use std::os::unix::fs::PermissionsExt;

    /// Shell stand-in for a backbone: emits `[i, 1]` per input image.
    fn fake_backbone(dir: &std::path::Path) -> String {
        let script = dir.join("fake.sh");
        std::fs::write(
            &script,
            r#"#!/bin/sh
while [ $# -gt 0 ]; do
  case "$1" in
    --input) IN="$2"; shift 2;;
    --output) OUT="$2"; shift 2;;
    *) shift;;
  esac
done
i=0; sep=""; printf '[' > "$OUT"
for f in "$IN"/*.png; do printf '%s[%d,1]' "$sep" "$i" >> "$OUT"; sep=","; i=$((i+1)); done
printf ']' >> "$OUT"
"#,
        )
        .unwrap();
        std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
        script.display().to_string()
    }

    #[test]
    fn runs_command_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let enc = ExternalEncoder {
            encoder_id: "fake".into(),
            dim: 2,
            input_size_px: 16,
            command: vec![fake_backbone(dir.path())],
        };
        let imgs = vec![RgbImage::from_pixel(20, 20, Rgb([1, 2, 3])); 3];
        let out = enc.embed_batch(&imgs).unwrap();
        assert_eq!(out, vec![vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, 1.0]]);

        let wrong_dim = ExternalEncoder { dim: 3, ..enc.clone() };
        assert!(matches!(
            wrong_dim.embed_batch(&imgs),
            Err(EncoderError::DimensionMismatch(2, 3))
        ));
        let missing = ExternalEncoder {
            command: vec!["/nonexistent/backbone".into()],
            ..enc
        };
        assert!(matches!(missing.embed_batch(&imgs), Err(EncoderError::External(_))));
    }
}
