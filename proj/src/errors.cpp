#include "stochctl/errors.hpp"

namespace stochctl {

const char* error_kind_name(ErrorKind kind)
{
    switch (kind) {
    case ErrorKind::Config: return "configuration error";
    case ErrorKind::Shape: return "shape error";
    case ErrorKind::Domain: return "domain error";
    case ErrorKind::Divergence: return "divergence error";
    case ErrorKind::NotControllable: return "not-controllable error";
    case ErrorKind::Reduction: return "reduction-impossible error";
    case ErrorKind::Resource: return "resource error";
    case ErrorKind::BasisDegeneracy: return "basis-degeneracy error";
    case ErrorKind::Accuracy: return "accuracy error";
    case ErrorKind::Restriction: return "restriction error";
    case ErrorKind::Precondition: return "precondition error";
    case ErrorKind::Infeasible: return "infeasible error";
    case ErrorKind::UnsupportedSet: return "unsupported-set error";
    case ErrorKind::Input: return "input error";
    }
    return "error";
}

} // namespace stochctl
