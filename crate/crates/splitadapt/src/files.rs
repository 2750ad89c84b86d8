//! File IO: atomic writes, datasets, checkpoints, PGM images and wire-tap dumps.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use splitadapt_core::data::{to_pgm, Dataset};
use splitadapt_core::head::TaskModule;
use splitadapt_core::protocol::{split_frames, Frame};
use splitadapt_core::vit::{Checkpoint, ModelSpec, VitParams};

use crate::Error;

/// Writes through a temporary file in the same directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), Error> {
    Ok(write_atomic(path, &data.to_bytes())?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, Error> {
    Ok(Dataset::from_bytes(&fs::read(path)?)?)
}

pub fn write_checkpoint(path: &Path, spec: &ModelSpec, params: &VitParams, head: &TaskModule) -> Result<(), Error> {
    let ck = Checkpoint { spec: *spec, params: params.clone(), extras: head.tensors().into_iter().cloned().collect() };
    Ok(write_atomic(path, &ck.to_bytes())?)
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelSpec, VitParams, TaskModule), Error> {
    let ck = Checkpoint::from_bytes(&fs::read(path)?)?;
    let head = TaskModule::from_tensors(ck.extras)?;
    Ok((ck.spec, ck.params, head))
}

/// One PGM per image, named `{prefix}{index:04}.pgm`.
pub fn write_pgms(dir: &Path, prefix: &str, images: &[f64], width: usize, height: usize) -> io::Result<usize> {
    let per = width * height;
    let mut n = 0;
    for (i, img) in images.chunks(per).enumerate() {
        write_atomic(&dir.join(format!("{prefix}{i:04}.pgm")), &to_pgm(img, width, height))?;
        n += 1;
    }
    Ok(n)
}

/// Frames concatenated in capture order.
pub fn write_dump<'a>(path: &Path, frames: impl IntoIterator<Item = &'a [u8]>) -> io::Result<()> {
    let bytes: Vec<u8> = frames.into_iter().flatten().copied().collect();
    write_atomic(path, &bytes)
}

pub fn read_dump(path: &Path) -> Result<Vec<Frame>, Error> {
    Ok(split_frames(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
