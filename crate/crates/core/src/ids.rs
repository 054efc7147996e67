use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($name:ident, $prefix:literal) => {
        #[derive(
            Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        pub struct $name(pub u32);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(ClientId, "c");
id_type!(ProxyId, "ps");
// Catalog ids are 1-based; id 1 is the most popular rank.
id_type!(VideoId, "v");
// One session per admitted request; the value is the request index.
id_type!(SessionId, "s");

impl VideoId {
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl ClientId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl ProxyId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}
