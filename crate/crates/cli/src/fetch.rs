//! Download of the canonical MNIST archives.

use std::fs;
use std::io::Read;
use std::path::Path;

use stochsyn_core::data::{read_maybe_gz, sha256_hex, MNIST_FILES};

use crate::error::{CliError, CliResult};

const MIRRORS: [&str; 2] = [
    "https://storage.googleapis.com/cvdf-datasets/mnist",
    "https://ossci-datasets.s3.amazonaws.com/mnist",
];

const MAX_DOWNLOAD: u64 = 64 << 20;

fn download(url: &str) -> Result<Vec<u8>, String> {
    let response = ureq::get(url).call().map_err(|e| e.to_string())?;
    let mut body = Vec::new();
    response
        .into_reader()
        .take(MAX_DOWNLOAD)
        .read_to_end(&mut body)
        .map_err(|e| e.to_string())?;
    Ok(body)
}

/// Downloads every MNIST file missing from `dir` and verifies its
/// uncompressed checksum before moving it into place.
pub fn fetch_missing(dir: &Path) -> CliResult<Vec<String>> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let mut fetched = Vec::new();
    for (name, sha) in MNIST_FILES {
        if dir.join(name).is_file() || dir.join(format!("{name}.gz")).is_file() {
            continue;
        }
        let part = dir.join(format!("{name}.gz.part"));
        let mut errors = Vec::new();
        let mut done = false;
        for mirror in MIRRORS {
            let url = format!("{mirror}/{name}.gz");
            log::info!("downloading {url}");
            let body = match download(&url) {
                Ok(b) => b,
                Err(e) => {
                    errors.push(format!("{url}: {e}"));
                    continue;
                }
            };
            fs::write(&part, &body).map_err(CliError::io(&part))?;
            let actual = read_maybe_gz(&part).map(|raw| sha256_hex(&raw));
            match actual {
                Ok(actual) if actual == sha => {
                    let target = dir.join(format!("{name}.gz"));
                    fs::rename(&part, &target).map_err(CliError::io(&target))?;
                    done = true;
                    break;
                }
                Ok(actual) => errors.push(format!("{url}: checksum {actual} != {sha}")),
                Err(e) => errors.push(format!("{url}: {e}")),
            }
            let _ = fs::remove_file(&part);
        }
        if !done {
            return Err(CliError::Data(format!(
                "could not fetch {name}:\n  {}",
                errors.join("\n  ")
            )));
        }
        fetched.push(name.to_string());
    }
    Ok(fetched)
}
