//! Bearer-token accounts. Only the SHA-256 of a token is stored; the token
//! itself is shown once, at creation.

use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::model::{UserId, UserProfile, UserRole};
use crate::store::{Repository, StoreResult};

const TOKEN_PREFIX: &str = "msk_";

pub fn generate_token() -> String {
    let mut bytes = [0u8; 24];
    rand::rng().fill_bytes(&mut bytes);
    format!("{TOKEN_PREFIX}{}", hex::encode(bytes))
}

pub fn hash_token(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

/// Creates a user and returns it with its freshly issued token.
pub fn create_user(
    store: &dyn Repository,
    display_name: &str,
    role: UserRole,
) -> StoreResult<(UserProfile, String)> {
    let token = generate_token();
    let user = create_user_with_token(store, display_name, role, &token)?;
    Ok((user, token))
}

/// Creates a user bound to a caller-chosen token (bootstrap and tests).
pub fn create_user_with_token(
    store: &dyn Repository,
    display_name: &str,
    role: UserRole,
    token: &str,
) -> StoreResult<UserProfile> {
    let user = UserProfile {
        id: UserId::generate(),
        display_name: display_name.to_owned(),
        role,
        credential_hash: hash_token(token),
    };
    store.insert_user(&user)?;
    Ok(user)
}

pub fn authenticate(store: &dyn Repository, token: &str) -> StoreResult<Option<UserProfile>> {
    if token.is_empty() {
        return Ok(None);
    }
    store.user_by_credential(&hash_token(token))
}
