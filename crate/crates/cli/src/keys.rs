//! Key material on disk: `meter.key`, `meter.pub` and `params.toml`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use privbill::group::{derive_params, GroupId, GroupParams, PrimeOrderGroup};
use privbill::metering::{public_key_from_hex, MeterKeypair, MeterPublicKey};
use serde::{Deserialize, Serialize};

pub const SECRET_FILE: &str = "meter.key";
pub const PUBLIC_FILE: &str = "meter.pub";
pub const PARAMS_FILE: &str = "params.toml";

#[derive(Debug, Serialize, Deserialize)]
struct SecretFile {
    meter_id: String,
    secret: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PublicFile {
    meter_id: String,
    public_key: String,
}

/// Public parameters. `g` and `h` are informative; loading re-derives them
/// from the tag and refuses a file whose encodings disagree.
#[derive(Debug, Serialize, Deserialize)]
pub struct ParamsFile {
    pub group_id: String,
    pub domain_tag: String,
    pub g: String,
    pub h: String,
}

impl ParamsFile {
    pub fn from_params<G: PrimeOrderGroup>(params: &GroupParams<G>) -> Self {
        Self {
            group_id: G::ID.to_string(),
            domain_tag: hex::encode(params.domain_tag()),
            g: hex::encode(G::element_to_bytes(params.g())),
            h: hex::encode(G::element_to_bytes(params.h())),
        }
    }
}

pub fn read_group_id(path: &Path) -> Result<GroupId> {
    let file: ParamsFile = read_toml(path)?;
    Ok(file.group_id.parse()?)
}

pub fn load_params<G: PrimeOrderGroup>(path: &Path) -> Result<GroupParams<G>> {
    let file: ParamsFile = read_toml(path)?;
    let id: GroupId = file.group_id.parse()?;
    let tag = hex::decode(&file.domain_tag).context("domain_tag is not hex")?;
    let params = derive_params::<G>(id, &tag)?;
    let expected = ParamsFile::from_params(&params);
    if expected.g != file.g.to_lowercase() || expected.h != file.h.to_lowercase() {
        bail!("{}: g/h do not match the generators derived from domain_tag", path.display());
    }
    Ok(params)
}

pub fn load_keypair(path: &Path) -> Result<MeterKeypair> {
    let file: SecretFile = read_toml(path)?;
    Ok(MeterKeypair::from_secret_hex(file.meter_id, &file.secret)?)
}

pub fn load_public(path: &Path) -> Result<(String, MeterPublicKey)> {
    let file: PublicFile = read_toml(path)?;
    Ok((file.meter_id, public_key_from_hex(&file.public_key)?))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Writes the three key files into `dir`, creating it if needed. Existing
/// files are left alone unless `force`.
pub fn write_keyfiles<G: PrimeOrderGroup>(
    dir: &Path,
    keys: &MeterKeypair,
    params: &GroupParams<G>,
    force: bool,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let paths: Vec<PathBuf> = [SECRET_FILE, PUBLIC_FILE, PARAMS_FILE].iter().map(|f| dir.join(f)).collect();
    if !force {
        if let Some(existing) = paths.iter().find(|p| p.exists()) {
            bail!("{} already exists; pass --force to overwrite", existing.display());
        }
    }
    let secret = SecretFile {
        meter_id: keys.meter_id().to_string(),
        secret: keys.secret_hex(),
    };
    let public = PublicFile {
        meter_id: keys.meter_id().to_string(),
        public_key: hex::encode(keys.public_key().as_bytes()),
    };
    write_file(&paths[0], &toml::to_string(&secret)?, true)?;
    write_file(&paths[1], &toml::to_string(&public)?, false)?;
    write_file(&paths[2], &toml::to_string(&ParamsFile::from_params(params))?, false)?;
    Ok(paths)
}

fn write_file(path: &Path, text: &str, private: bool) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    #[cfg(unix)]
    if private {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600))?;
    }
    #[cfg(not(unix))]
    let _ = private;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use privbill::group::{Ristretto255, TestGroup23};

    #[test]
    fn params_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let keys = MeterKeypair::from_secret_bytes("m1", &[9u8; 32]);
        write_keyfiles(dir.path(), &keys, &GroupParams::<TestGroup23>::standard(), false).unwrap();
        let params = load_params::<TestGroup23>(&dir.path().join(PARAMS_FILE)).unwrap();
        assert_eq!(params, GroupParams::<TestGroup23>::standard());
        assert!(load_params::<Ristretto255>(&dir.path().join(PARAMS_FILE)).is_err());
        let loaded = load_keypair(&dir.path().join(SECRET_FILE)).unwrap();
        assert_eq!(loaded.public_key(), keys.public_key());
        let (id, pk) = load_public(&dir.path().join(PUBLIC_FILE)).unwrap();
        assert_eq!((id.as_str(), pk), ("m1", keys.public_key()));
    }

    #[test]
    fn tampered_generator_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let keys = MeterKeypair::from_secret_bytes("m1", &[9u8; 32]);
        write_keyfiles(dir.path(), &keys, &GroupParams::<TestGroup23>::standard(), false).unwrap();
        let path = dir.path().join(PARAMS_FILE);
        let text = std::fs::read_to_string(&path).unwrap().replace("h = \"09\"", "h = \"0d\"");
        std::fs::write(&path, text).unwrap();
        assert!(load_params::<TestGroup23>(&path).is_err());
    }
}
