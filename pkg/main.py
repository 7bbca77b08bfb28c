import click

from ebtrack import __version__
from ebtrack.commands import ablate_app, eval_app, propose_app, synth_app, track_app


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="ebtrack")
def app():
    """
    Proposal-driven single-object tracking: track, evaluate, inspect
    proposals, generate synthetic sequences and run candidate-set ablations.
    """


app.add_command(track_app)
app.add_command(eval_app)
app.add_command(propose_app)
app.add_command(synth_app)
app.add_command(ablate_app)


if __name__ == "__main__":
    app()
