#pragma once

#include <stdexcept>
#include <string>

namespace trajprobe {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define TRAJPROBE_DEFINE_ERROR(Name)          \
    class Name : public Error {               \
    public:                                   \
        using Error::Error;                   \
    }

TRAJPROBE_DEFINE_ERROR(DimensionError);
TRAJPROBE_DEFINE_ERROR(DataError);
TRAJPROBE_DEFINE_ERROR(FormatError);
TRAJPROBE_DEFINE_ERROR(DegenerateTrajectoryError);
TRAJPROBE_DEFINE_ERROR(StratificationError);
TRAJPROBE_DEFINE_ERROR(TrainingError);
TRAJPROBE_DEFINE_ERROR(NumericalError);
TRAJPROBE_DEFINE_ERROR(UndefinedMetricError);
TRAJPROBE_DEFINE_ERROR(ZeroModelError);
TRAJPROBE_DEFINE_ERROR(InsufficientPairsError);
TRAJPROBE_DEFINE_ERROR(SpecError);
TRAJPROBE_DEFINE_ERROR(ConfigError);

#undef TRAJPROBE_DEFINE_ERROR

} // namespace trajprobe
