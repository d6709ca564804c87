//! Declarative description of a composed DMM and its JSON form.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::SimError;

macro_rules! terminal_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            /// Every variant, in grammar production order.
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// The grammar terminal spelling.
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }

            pub fn from_terminal(text: &str) -> Option<Self> {
                match text { $($text => Some($name::$variant),)+ _ => None }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

terminal_enum!(
    /// Free-list organisation of one allocator.
    AllocatorClass {
        SegregatedFreeList => "SegregatedFreeList",
        SimpleSegregatedStorage => "SimpleSegregatedStorage",
        ExactSegregatedFit => "ExactSegregatedFit",
        BuddySystemBinary => "BuddySystemBinary",
        BuddySystemFibonacci => "BuddySystemFibonacci",
    }
);

terminal_enum!(
    DataStructureKind {
        Sll => "SLL",
        Dll => "DLL",
        Btree => "BTREE",
    }
);

terminal_enum!(
    AllocationMechanism {
        First => "FIRST",
        Best => "BEST",
        Exact => "EXACT",
    }
);

terminal_enum!(
    AllocationPolicy {
        Fifo => "FIFO",
        Lifo => "LIFO",
    }
);

impl AllocatorClass {
    pub fn is_buddy(self) -> bool {
        matches!(self, AllocatorClass::BuddySystemBinary | AllocatorClass::BuddySystemFibonacci)
    }
}

/// One allocator of a DMM. It serves requests in `(previous upper bound,
/// upper_bound]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AllocatorSpec {
    pub class: AllocatorClass,
    #[serde(rename = "split")]
    pub allow_splitting: bool,
    #[serde(rename = "coalesce")]
    pub allow_coalescing: bool,
    pub upper_bound: u64,
    #[serde(rename = "ds")]
    pub data_structure: DataStructureKind,
    pub mechanism: AllocationMechanism,
    pub policy: AllocationPolicy,
    /// Explicit size classes for exact/simple segregated allocators. When
    /// absent the classes are the observed trace sizes in range.
    #[serde(default, rename = "sizes", skip_serializing_if = "Option::is_none")]
    pub class_sizes: Option<Vec<u64>>,
    /// Freed blocks go straight back to the system (mmap-style large objects).
    #[serde(default, rename = "release", skip_serializing_if = "std::ops::Not::not")]
    pub release_to_system: bool,
}

impl AllocatorSpec {
    pub fn new(
        class: AllocatorClass,
        allow_splitting: bool,
        allow_coalescing: bool,
        upper_bound: u64,
        data_structure: DataStructureKind,
        mechanism: AllocationMechanism,
        policy: AllocationPolicy,
    ) -> Self {
        Self {
            class,
            allow_splitting,
            allow_coalescing,
            upper_bound,
            data_structure,
            mechanism,
            policy,
            class_sizes: None,
            release_to_system: false,
        }
    }
}

/// Ordered allocator stack. Bounds are strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DmmSpec {
    pub allocators: Vec<AllocatorSpec>,
}

impl DmmSpec {
    pub fn new(allocators: Vec<AllocatorSpec>) -> Self {
        Self { allocators }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.allocators.is_empty() {
            return Err(SimError::InvalidSpec("a DMM needs at least one allocator".into()));
        }
        let mut lo = 0;
        for (i, a) in self.allocators.iter().enumerate() {
            if a.upper_bound <= lo {
                return Err(SimError::InvalidSpec(format!(
                    "allocator {i}: upper bound {} does not exceed {lo}",
                    a.upper_bound
                )));
            }
            if let Some(sizes) = &a.class_sizes {
                if sizes.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(SimError::InvalidSpec(format!(
                        "allocator {i}: class sizes must be strictly increasing"
                    )));
                }
            }
            lo = a.upper_bound;
        }
        Ok(())
    }

    /// Upper bound of the last allocator: the largest servable request.
    pub fn max_request(&self) -> u64 {
        self.allocators.last().map_or(0, |a| a.upper_bound)
    }

    /// `(lower, upper]` range served by allocator `i`.
    pub fn range(&self, i: usize) -> (u64, u64) {
        let lo = if i == 0 { 0 } else { self.allocators[i - 1].upper_bound };
        (lo, self.allocators[i].upper_bound)
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("spec serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let spec: DmmSpec =
            serde_json::from_str(text).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}
