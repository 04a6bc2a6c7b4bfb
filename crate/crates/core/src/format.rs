//! Little-endian artifact headers shared by every binary file format.
//!
//! Each file starts with a 4-byte magic tag followed by a `u16` version.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const VERSION: u16 = 1;

pub const KEYPOINTS_MAGIC: [u8; 4] = *b"FCKP";
pub const DESCRIPTORS_MAGIC: [u8; 4] = *b"FCDS";
pub const CODEBOOK_MAGIC: [u8; 4] = *b"FCCB";
pub const ENCODED_MAGIC: [u8; 4] = *b"FCEN";
pub const MODEL_MAGIC: [u8; 4] = *b"FCSV";

pub(crate) fn write_header<W: Write>(w: &mut W, magic: [u8; 4]) -> std::io::Result<()> {
    w.write_all(&magic)?;
    w.write_u16::<LittleEndian>(VERSION)
}

pub(crate) fn read_header<R: Read>(r: &mut R, magic: [u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(truncated)?;
    if found != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(&found)
        )));
    }
    let version = r.read_u16::<LittleEndian>().map_err(truncated)?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found: version,
        });
    }
    Ok(())
}

pub(crate) fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated or unreadable record: {e}"))
}

pub(crate) fn save_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file))
}
