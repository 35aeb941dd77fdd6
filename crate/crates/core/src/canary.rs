//! Leak detection by planted canary strings.
//!
//! Tests plant unique byte strings in private inputs and then scan everything
//! observable outside the enclave: values returned from `exec`, files, log
//! lines, response bodies. Both the raw bytes and their lowercase hex form
//! count as a hit, since several outputs hex-encode binary fields.

use std::path::{Path, PathBuf};

use parking_lot::Mutex;

#[derive(Debug, Default)]
pub struct CanaryMonitor {
    needles: Vec<Vec<u8>>,
    hex_needles: Vec<Vec<u8>>,
    violations: Mutex<Vec<&'static str>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CanaryHit {
    pub location: String,
    pub canary_index: usize,
}

impl CanaryMonitor {
    pub fn new<I, S>(canaries: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let needles: Vec<Vec<u8>> = canaries.into_iter().map(|c| c.as_ref().to_vec()).collect();
        let hex_needles = needles.iter().map(|n| hex::encode(n).into_bytes()).collect();
        CanaryMonitor { needles, hex_needles, violations: Mutex::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.needles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.needles.is_empty()
    }

    pub fn first_hit(&self, haystack: &[u8]) -> Option<usize> {
        (0..self.needles.len()).find(|&i| {
            contains(haystack, &self.needles[i]) || contains(haystack, &self.hex_needles[i])
        })
    }

    pub fn hits(&self, location: &str, haystack: &[u8]) -> Vec<CanaryHit> {
        (0..self.needles.len())
            .filter(|&i| contains(haystack, &self.needles[i]) || contains(haystack, &self.hex_needles[i]))
            .map(|i| CanaryHit { location: location.to_string(), canary_index: i })
            .collect()
    }

    /// Scan every regular file under `root`, recursively.
    pub fn scan_dir(&self, root: &Path) -> std::io::Result<Vec<CanaryHit>> {
        let mut hits = Vec::new();
        let mut stack: Vec<PathBuf> = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    let bytes = std::fs::read(&path)?;
                    hits.extend(self.hits(&path.display().to_string(), &bytes));
                }
            }
        }
        Ok(hits)
    }

    pub(crate) fn record_violation(&self, operation: &'static str) {
        self.violations.lock().push(operation);
    }

    pub fn violations(&self) -> Vec<&'static str> {
        self.violations.lock().clone()
    }
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}
