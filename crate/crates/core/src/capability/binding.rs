use sha2::{Digest as _, Sha256};

use super::{Digest, EsoCapability, SignedEnvelope};

/// SHA-256 over the complete serialized master envelope, signature included.
pub fn bind_hash(master_env: &SignedEnvelope) -> Digest {
    Digest(Sha256::digest(master_env.to_token().as_bytes()).into())
}

/// True iff `eso` was issued alongside exactly this master envelope.
pub fn check_binding(eso: &EsoCapability, master_env: &SignedEnvelope) -> bool {
    eso.master_hash == bind_hash(master_env)
}
