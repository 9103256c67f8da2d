//! CIFAR-10 binary format ingestion: 3073-byte records of one label byte
//! followed by 1024 red, 1024 green and 1024 blue bytes, row-major 32x32.

use super::ClsSample;
use crate::error::{IonError, Result};
use crate::image::{ColorSpace, Image};
use std::io::Read;
use std::path::Path;

const RECORD: usize = 3073;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<ClsSample>> {
    if bytes.len() % RECORD != 0 {
        return Err(IonError::Format(format!(
            "cifar10: file size {} is not a multiple of the {RECORD}-byte record (offset {})",
            bytes.len(),
            bytes.len() - bytes.len() % RECORD
        )));
    }
    let mut out = Vec::with_capacity(bytes.len() / RECORD);
    for (rec_idx, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(IonError::Format(format!(
                "cifar10: record {rec_idx} has label byte {label} > 9"
            )));
        }
        let mut image = Image::new(SIDE, SIDE, ColorSpace::Rgb);
        for p in 0..PLANE {
            let i = p * 3;
            image.pixels[i] = rec[1 + p] as f32 / 255.0;
            image.pixels[i + 1] = rec[1 + PLANE + p] as f32 / 255.0;
            image.pixels[i + 2] = rec[1 + 2 * PLANE + p] as f32 / 255.0;
        }
        out.push(ClsSample { image, label: label as u32, domain: "clean".to_string() });
    }
    Ok(out)
}

pub fn load_cifar10_binary(path: &Path) -> Result<Vec<ClsSample>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_cifar10(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_record_parses_by_the_format_definition() {
        let mut rec = vec![0u8; RECORD];
        rec[0] = 3;
        for b in rec[1..].iter_mut() {
            *b = 255;
        }
        let samples = parse_cifar10(&rec).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].label, 3);
        assert!(samples[0].image.pixels.iter().all(|&v| v == 1.0));

        // channel planes land in the right interleaved slots
        let mut rec = vec![0u8; RECORD];
        rec[0] = 0;
        rec[1] = 255; // red of pixel (0,0)
        rec[1 + PLANE + 1] = 128; // green of pixel (0,1)
        let samples = parse_cifar10(&rec).unwrap();
        let img = &samples[0].image;
        assert_eq!(img.get(0, 0)[0], 1.0);
        assert_eq!(img.get(0, 0)[1], 0.0);
        assert!((img.get(0, 1)[1] - 128.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn empty_file_gives_empty_list() {
        assert!(parse_cifar10(&[]).unwrap().is_empty());
    }

    #[test]
    fn truncated_record_names_offset() {
        let bytes = vec![0u8; RECORD + 10];
        let err = parse_cifar10(&bytes).unwrap_err();
        assert!(err.to_string().contains("3073"), "{err}");
        assert!(err.to_string().contains(&RECORD.to_string()));
    }

    #[test]
    fn bad_label_names_record_index() {
        let mut bytes = vec![0u8; 2 * RECORD];
        bytes[RECORD] = 11;
        let err = parse_cifar10(&bytes).unwrap_err();
        assert!(err.to_string().contains("record 1"), "{err}");
    }
}
