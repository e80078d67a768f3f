use std::collections::HashMap;

use thiserror::Error;

use crate::privacy::Tariff;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("no tariff published for meter {meter_id} over [{i0}, +{n})")]
    UnknownRange { meter_id: String, i0: u64, n: usize },
    #[error("tariff for meter {meter_id} at i0={i0} was already served and cannot change")]
    AlreadyServed { meter_id: String, i0: u64 },
}

#[derive(Debug)]
struct Entry {
    tariff: Tariff,
    served: bool,
}

/// Published tariffs keyed by `(meter, i0, n)`. Once served, an entry is
/// frozen so verification always uses what the PC was given.
#[derive(Debug, Default)]
pub struct TariffStore {
    entries: HashMap<(String, u64, usize), Entry>,
}

impl TariffStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&mut self, meter_id: &str, tariff: Tariff) -> Result<(), StoreError> {
        let key = (meter_id.to_string(), tariff.i0(), tariff.len());
        match self.entries.get_mut(&key) {
            Some(entry) if entry.served && entry.tariff != tariff => Err(StoreError::AlreadyServed {
                meter_id: meter_id.to_string(),
                i0: tariff.i0(),
            }),
            Some(entry) => {
                entry.tariff = tariff;
                Ok(())
            }
            None => {
                self.entries.insert(key, Entry { tariff, served: false });
                Ok(())
            }
        }
    }

    /// Hands out the tariff and freezes it.
    pub fn serve(&mut self, meter_id: &str, i0: u64, n: usize) -> Result<Tariff, StoreError> {
        let entry = self
            .entries
            .get_mut(&(meter_id.to_string(), i0, n))
            .ok_or_else(|| StoreError::UnknownRange {
                meter_id: meter_id.to_string(),
                i0,
                n,
            })?;
        entry.served = true;
        Ok(entry.tariff.clone())
    }

    /// Read-only lookup that does not freeze the entry.
    pub fn get(&self, meter_id: &str, i0: u64, n: usize) -> Option<&Tariff> {
        self.entries
            .get(&(meter_id.to_string(), i0, n))
            .map(|entry| &entry.tariff)
    }

    pub fn is_published(&self, meter_id: &str, i0: u64, n: usize) -> bool {
        self.get(meter_id, i0, n).is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tariff(rates: &[u32]) -> Tariff {
        Tariff::new(96, rates.to_vec()).unwrap()
    }

    #[test]
    fn publish_then_serve_round_trips() {
        let mut store = TariffStore::new();
        store.publish("m1", tariff(&[1, 2, 3])).unwrap();
        assert_eq!(store.serve("m1", 96, 3).unwrap(), tariff(&[1, 2, 3]));
    }

    #[test]
    fn unpublished_range_is_an_error() {
        let mut store = TariffStore::new();
        store.publish("m1", tariff(&[1, 2, 3])).unwrap();
        assert!(matches!(store.serve("m1", 97, 3), Err(StoreError::UnknownRange { .. })));
        assert!(matches!(store.serve("m1", 96, 2), Err(StoreError::UnknownRange { .. })));
        assert!(matches!(store.serve("m2", 96, 3), Err(StoreError::UnknownRange { .. })));
    }

    #[test]
    fn served_tariff_is_immutable() {
        let mut store = TariffStore::new();
        store.publish("m1", tariff(&[1, 2, 3])).unwrap();
        // still unserved: republish allowed
        store.publish("m1", tariff(&[1, 2, 4])).unwrap();
        store.serve("m1", 96, 3).unwrap();
        assert!(matches!(
            store.publish("m1", tariff(&[9, 9, 9])),
            Err(StoreError::AlreadyServed { .. })
        ));
        // identical republish is a no-op
        store.publish("m1", tariff(&[1, 2, 4])).unwrap();
        assert_eq!(store.serve("m1", 96, 3).unwrap(), tariff(&[1, 2, 4]));
    }
}
