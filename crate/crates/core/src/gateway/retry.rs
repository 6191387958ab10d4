use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// Bounded exponential backoff. Only failures classified as retryable
/// (transport errors, 5xx) are retried.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    #[serde(with = "millis")]
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

#[derive(Debug)]
pub(crate) enum Attempt {
    Retryable(String),
    Fatal(String),
}

#[derive(Debug)]
pub(crate) struct Exhausted {
    pub attempts: u32,
    pub retryable: bool,
    pub message: String,
}

impl RetryPolicy {
    pub(crate) fn run<T>(&self, mut op: impl FnMut() -> Result<T, Attempt>) -> Result<T, Exhausted> {
        let max = self.max_attempts.max(1);
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(message)) => {
                    return Err(Exhausted {
                        attempts: attempt,
                        retryable: false,
                        message,
                    })
                }
                Err(Attempt::Retryable(message)) if attempt >= max => {
                    return Err(Exhausted {
                        attempts: attempt,
                        retryable: true,
                        message,
                    })
                }
                Err(Attempt::Retryable(message)) => {
                    tracing::debug!(attempt, %message, "retrying after transient failure");
                    thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
            }
        }
    }
}

/// Classifies an HTTP status: 5xx, 429 and 408 are transient, anything else
/// non-2xx is not.
pub(crate) fn classify_status(status: u16, body: &str) -> Attempt {
    let message = format!("HTTP {status}: {}", body.chars().take(300).collect::<String>());
    if (500..600).contains(&status) || status == 429 || status == 408 {
        Attempt::Retryable(message)
    } else {
        Attempt::Fatal(message)
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn fast() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
        }
    }

    #[test]
    fn retries_transient_up_to_limit() {
        let calls = Cell::new(0);
        let r: Result<(), _> = fast().run(|| {
            calls.set(calls.get() + 1);
            Err(Attempt::Retryable("503".into()))
        });
        let e = r.unwrap_err();
        assert_eq!(calls.get(), 3);
        assert_eq!(e.attempts, 3);
        assert!(e.retryable);
    }

    #[test]
    fn fatal_is_not_retried() {
        let calls = Cell::new(0);
        let r: Result<(), _> = fast().run(|| {
            calls.set(calls.get() + 1);
            Err(Attempt::Fatal("400".into()))
        });
        assert_eq!(calls.get(), 1);
        assert!(!r.unwrap_err().retryable);
    }

    #[test]
    fn recovers_after_transient() {
        let calls = Cell::new(0);
        let r = fast().run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 2 {
                Err(Attempt::Retryable("reset".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(r.unwrap(), 7);
    }

    #[test]
    fn status_classification() {
        assert!(matches!(classify_status(502, ""), Attempt::Retryable(_)));
        assert!(matches!(classify_status(429, ""), Attempt::Retryable(_)));
        assert!(matches!(classify_status(404, ""), Attempt::Fatal(_)));
    }
}
