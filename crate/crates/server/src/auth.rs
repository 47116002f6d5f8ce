//! Static token authentication.
//!
//! The auth file lists users with a bearer token and a role:
//!
//! ```yaml
//! users:
//!   - {name: alice, token: 7d1f0c, role: user}
//!   - {name: sam, token: 93ab42, role: staff}
//! ```

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum AuthError {
    #[error("reading auth file: {0}")]
    Io(#[from] std::io::Error),
    #[error("auth file: {0}")]
    Yaml(#[from] serde_yaml::Error),
    #[error("auth file: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Staff,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserEntry {
    pub name: String,
    pub token: String,
    pub role: Role,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AuthFile {
    users: Vec<UserEntry>,
}

/// Authenticated caller.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Principal {
    pub name: String,
    pub role: Role,
}

impl Principal {
    pub fn is_staff(&self) -> bool {
        self.role == Role::Staff
    }

    /// Reports: the job's owner or staff.
    pub fn may_read_job(&self, owner: Option<&str>) -> bool {
        self.is_staff() || owner == Some(self.name.as_str())
    }
}

#[derive(Debug, Clone, Default)]
pub struct AuthTable {
    by_token: HashMap<String, Principal>,
}

impl AuthTable {
    pub fn new(users: Vec<UserEntry>) -> Result<Self, AuthError> {
        let mut by_token = HashMap::new();
        for u in users {
            if u.name.is_empty() {
                return Err(AuthError::Invalid("user with empty name".into()));
            }
            if u.token.len() < 6 || u.token.chars().any(char::is_whitespace) {
                return Err(AuthError::Invalid(format!(
                    "token of {} must be at least 6 characters without whitespace",
                    u.name
                )));
            }
            let p = Principal {
                name: u.name.clone(),
                role: u.role,
            };
            if by_token.insert(u.token, p).is_some() {
                return Err(AuthError::Invalid(format!(
                    "token of {} is not unique",
                    u.name
                )));
            }
        }
        Ok(AuthTable { by_token })
    }

    pub fn from_yaml(text: &str) -> Result<Self, AuthError> {
        let file: AuthFile = serde_yaml::from_str(text)?;
        AuthTable::new(file.users)
    }

    pub fn load(path: &Path) -> Result<Self, AuthError> {
        AuthTable::from_yaml(&std::fs::read_to_string(path)?)
    }

    /// The single credential check: `Authorization: Bearer <token>`.
    pub fn authenticate(&self, authorization: Option<&str>) -> Option<&Principal> {
        let token = authorization?.strip_prefix("Bearer ")?.trim();
        self.by_token.get(token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FILE: &str = "users:\n  - {name: alice, token: tok-alice, role: user}\n  - {name: sam, token: tok-sam, role: staff}\n";

    #[test]
    fn bearer_tokens() {
        let t = AuthTable::from_yaml(FILE).unwrap();
        assert_eq!(
            t.authenticate(Some("Bearer tok-alice")).unwrap().name,
            "alice"
        );
        assert!(t.authenticate(Some("Bearer tok-sam")).unwrap().is_staff());
        assert!(t.authenticate(Some("tok-alice")).is_none());
        assert!(t.authenticate(Some("Bearer nope")).is_none());
        assert!(t.authenticate(None).is_none());
    }

    #[test]
    fn owner_or_staff() {
        let alice = Principal {
            name: "alice".into(),
            role: Role::User,
        };
        assert!(alice.may_read_job(Some("alice")));
        assert!(!alice.may_read_job(Some("bob")));
        assert!(!alice.may_read_job(None));
        let sam = Principal {
            name: "sam".into(),
            role: Role::Staff,
        };
        assert!(sam.may_read_job(None));
    }

    #[test]
    fn malformed_files() {
        assert!(AuthTable::from_yaml("users: [{name: a, token: short, role: user}]").is_err());
        assert!(AuthTable::from_yaml("users: [{name: a, token: abcdefg, role: admin}]").is_err());
        let dup = "users: [{name: a, token: abcdefg, role: user}, {name: b, token: abcdefg, role: staff}]";
        assert!(AuthTable::from_yaml(dup).is_err());
        assert!(AuthTable::from_yaml("nobody: here").is_err());
    }
}
