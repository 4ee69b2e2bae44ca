#pragma once

namespace hte {

// Treatment is measured in dollars; effects are reported per $10 of treatment.
inline constexpr double kEffectScale = 10.0;

// Significance level used for CAPE flags and significant-responder filters.
inline constexpr double kSignificanceLevel = 0.05;

}  // namespace hte
