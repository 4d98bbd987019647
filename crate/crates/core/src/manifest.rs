//! Content hashing for run manifests.

use sha1::{Digest, Sha1};

/// Git blob hash (`sha1("blob <len>\0" ++ content)`) as lowercase hex.
pub fn git_hash(content: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
