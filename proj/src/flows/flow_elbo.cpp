#include "d2pcca/flows/flow_elbo.hpp"

#include "d2pcca/errors.hpp"

namespace d2pcca::flows {

model::ElboTerms flow_elbo(Tape& tape, const model::D2pccaModel& model, const model::SequenceBatch& x,
                           model::NoiseSource& noise, const model::ElboOptions& options) {
    if (!model.flow) throw ConfigError("flow_elbo: model has no flow stack attached");
    return model::elbo_with_flow(tape, model, x, noise, options, &*model.flow);
}

model::ElboTerms flow_elbo(Tape& tape, const model::D2pccaModel& model, const FlowStack& stack,
                           const model::SequenceBatch& x, model::NoiseSource& noise,
                           const model::ElboOptions& options) {
    return model::elbo_with_flow(tape, model, x, noise, options, &stack);
}

}  // namespace d2pcca::flows
