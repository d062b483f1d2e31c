//! Plugin file format.
//!
//! ```text
//! "MCTGP1"
//! u64 LE length + UTF-8   aspect name
//! u64 LE length + UTF-8   family tag
//! u64 LE length + UTF-8   constraint template
//! u64 LE                  number of blocks
//! blocks as in checkpoints (name, rows, cols, f64 LE row-major)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{constraint_template, Family, Plugin};
use crate::error::{Error, Result};
use crate::taskgen::Aspect;
use crate::transformer::{read_block_any, read_str, read_u64, write_block, write_str, write_u64};

pub const PLUGIN_MAGIC: &[u8] = b"MCTGP1";

pub fn write_plugin(w: &mut impl Write, plugin: &Plugin, names: &[String]) -> Result<()> {
    if names.len() != plugin.tensors.len() {
        return Err(Error::Invalid("block names do not match plugin tensors".into()));
    }
    w.write_all(PLUGIN_MAGIC)?;
    write_str(w, plugin.aspect.name())?;
    write_str(w, plugin.family.tag())?;
    write_str(w, &constraint_template(plugin.aspect))?;
    write_u64(w, plugin.tensors.len() as u64)?;
    for (name, t) in names.iter().zip(&plugin.tensors) {
        write_block(w, name, t)?;
    }
    Ok(())
}

/// Reads a plugin; shapes are checked later against a model config.
pub fn read_plugin(r: &mut impl Read) -> Result<Plugin> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file too short".into()))?;
    if magic != PLUGIN_MAGIC {
        return Err(Error::Format("bad plugin magic".into()));
    }
    let aspect: Aspect = read_str(r, 64)?.parse()?;
    let family: Family = read_str(r, 64)?.parse().map_err(|_| Error::Format("unknown family tag".into()))?;
    let template = read_str(r, 4096)?;
    if template != constraint_template(aspect) {
        return Err(Error::Format(format!("constraint template `{template}` does not match {aspect}")));
    }
    let count = read_u64(r)? as usize;
    if count > 1 << 16 {
        return Err(Error::Format(format!("{count} blocks")));
    }
    let tensors = (0..count).map(|_| read_block_any(r).map(|(_, t)| t)).collect::<Result<Vec<_>>>()?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last block".into()));
    }
    Ok(Plugin { aspect, family, tensors })
}

pub fn save_plugin(path: &Path, plugin: &Plugin, config: &crate::transformer::ModelConfig) -> Result<()> {
    plugin.check(config)?;
    let names: Vec<String> = plugin.family.layout(config).into_iter().map(|(n, _)| n).collect();
    let mut buf = Vec::new();
    write_plugin(&mut buf, plugin, &names)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_plugin(path: &Path) -> Result<Plugin> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    read_plugin(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::ModelConfig;

    #[test]
    fn round_trip_all_families() {
        let config = ModelConfig::default();
        let dir = tempfile::tempdir().unwrap();
        for family in Family::ALL {
            let p = Plugin::init(Aspect::Keyword, family, &config, 4);
            let path = dir.path().join(format!("{family}.plug"));
            save_plugin(&path, &p, &config).unwrap();
            let bytes = std::fs::read(&path).unwrap();
            assert_eq!(&bytes[..6], b"MCTGP1");
            let back = load_plugin(&path).unwrap();
            assert_eq!(back, p);
            back.check(&config).unwrap();
        }
        assert!(matches!(load_plugin(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
    }
}
