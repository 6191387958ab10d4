/// Renders a price the way prompts and labels carry it: the shortest decimal
/// representation that parses back to the same value, without exponent.
pub fn render_price(price: f64) -> String {
    format!("{price}")
}

/// Rounds to cents; model answers and synthetic prices are quoted at this precision.
pub(crate) fn round_cents(price: f64) -> f64 {
    (price * 100.0).round() / 100.0
}
