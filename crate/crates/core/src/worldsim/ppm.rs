//! Binary PPM (P6, maxval 255) read/write, bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use super::{io_err, DataError};

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), DataError> {
    assert_eq!(rgb.len(), 3 * width * height, "ppm payload length");
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let header = format!("P6\n{width} {height}\n255\n");
    f.write_all(header.as_bytes()).map_err(|e| io_err(path, e))?;
    f.write_all(rgb).map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let malformed = |reason: &str| DataError::Malformed {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    // header: "P6" ws width ws height ws maxval single-ws payload
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, DataError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Malformed {
                path: path.display().to_string(),
                reason: "truncated header".to_string(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(malformed("not a P6 ppm"));
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| malformed("bad width"))?;
    let height: usize = token(&bytes)?.parse().map_err(|_| malformed("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| malformed("bad maxval"))?;
    if maxval != 255 {
        return Err(malformed("maxval must be 255"));
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * width * height;
    if bytes.len() < pos + need {
        return Err(malformed("truncated payload"));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}
