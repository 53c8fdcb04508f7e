#pragma once

#include <stdexcept>
#include <string>

namespace dualseg {

enum class ErrorKind {
    dimension,
    parameter,
    contract,
    resource,
    numeric,
    io,
    corrupt_checkpoint,
    checkpoint_shape,
    unsupported_version,
    config,
    dataset,
};

const char* to_string(ErrorKind kind);

// Base of every error thrown by the library. The kind survives the trip
// through the C API as a status code.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define DUALSEG_DEFINE_ERROR(Name, Kind)                                      \
    class Name : public Error {                                               \
    public:                                                                   \
        explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
    };

DUALSEG_DEFINE_ERROR(DimensionError, dimension)
DUALSEG_DEFINE_ERROR(ParameterError, parameter)
DUALSEG_DEFINE_ERROR(ContractError, contract)
DUALSEG_DEFINE_ERROR(ResourceError, resource)
DUALSEG_DEFINE_ERROR(NumericError, numeric)
DUALSEG_DEFINE_ERROR(IoError, io)
DUALSEG_DEFINE_ERROR(CorruptCheckpointError, corrupt_checkpoint)
DUALSEG_DEFINE_ERROR(CheckpointShapeError, checkpoint_shape)
DUALSEG_DEFINE_ERROR(UnsupportedVersionError, unsupported_version)
DUALSEG_DEFINE_ERROR(ConfigError, config)
DUALSEG_DEFINE_ERROR(DatasetError, dataset)

#undef DUALSEG_DEFINE_ERROR

}  // namespace dualseg
